#ifndef POTENTIA_H
#define POTENTIA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PotentiaStatus {
  POTENTIA_STATUS_OK = 0,
  POTENTIA_STATUS_NULL_ARGUMENT = 1,
  POTENTIA_STATUS_INVALID_UTF8 = 2,
  POTENTIA_STATUS_PARSE = 3,
  POTENTIA_STATUS_INVALID_SPEC = 4,
  POTENTIA_STATUS_INVALID_ARGUMENT = 5,
  POTENTIA_STATUS_NOT_POTENTIAL = 6,
  POTENTIA_STATUS_NUMERICAL = 7,
  POTENTIA_STATUS_IO = 8,
  POTENTIA_STATUS_PANIC = 9,
} PotentiaStatus;

typedef enum PotentiaVerdict {
  POTENTIA_VERDICT_MPG = 0,
  POTENTIA_VERDICT_CLPG_AT = 1,
  POTENTIA_VERDICT_NOT_POTENTIAL = 2,
} PotentiaVerdict;

// Result of a potential descent.
typedef struct PotentiaEquilibrium PotentiaEquilibrium;

// A parsed game together with its starting profile and initial state.
typedef struct PotentiaGame PotentiaGame;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *potentia_version(void);

// Copy the last error message of this thread into `buf` (NUL-terminated,
// truncated to `len`). Returns the length the full message needs,
// including the terminator; 0 when there is no error.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t potentia_last_error(char *buf, size_t len);

// Load a game file (TOML, or JSON for a `.json` extension).
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum PotentiaStatus potentia_game_load(const char *path, struct PotentiaGame **out);

// Parse a game from text; `json` non-zero selects JSON, otherwise TOML.
//
// # Safety
// `text` must be a NUL-terminated string; `out` must be writable.
enum PotentiaStatus potentia_game_parse(const char *text, int json, struct PotentiaGame **out);

// # Safety
// `game` must be null or a handle from this library not yet freed.
void potentia_game_free(struct PotentiaGame *game);

// Number of agents, state dimension and grid nodes. Any output may be null.
//
// # Safety
// `game` must be a live handle; non-null outputs must be writable.
enum PotentiaStatus potentia_game_dims(const struct PotentiaGame *game,
                                       size_t *n_agents,
                                       size_t *state_dim,
                                       size_t *nodes);

// Symmetric-Jacobian test around the game's policy (zero if none).
// `max_discrepancy` may be null.
//
// # Safety
// `game` must be a live handle; `verdict` must be writable.
enum PotentiaStatus potentia_verify(const struct PotentiaGame *game,
                                    size_t probes,
                                    uint64_t seed,
                                    enum PotentiaVerdict *verdict,
                                    double *max_discrepancy);

// Expected cost of `agent` under the game's policy and initial state.
//
// # Safety
// `game` must be a live handle; `out` must be writable.
enum PotentiaStatus potentia_value(const struct PotentiaGame *game, size_t agent, double *out);

// Minimise the game's potential from its policy and certify the result.
// `max_iter == 0` and `tol <= 0` select the defaults. Refuses games that
// fail the symmetry test with `POTENTIA_STATUS_NOT_POTENTIAL`.
//
// # Safety
// `game` must be a live handle; `out` must be writable.
enum PotentiaStatus potentia_nash_solve(const struct PotentiaGame *game,
                                        size_t max_iter,
                                        double tol,
                                        uint64_t seed,
                                        struct PotentiaEquilibrium **out);

// # Safety
// `eq` must be null or a handle from this library not yet freed.
void potentia_equilibrium_free(struct PotentiaEquilibrium *eq);

// Summary of a solve. Any output may be null.
//
// # Safety
// `eq` must be a live handle; non-null outputs must be writable.
enum PotentiaStatus potentia_equilibrium_summary(const struct PotentiaEquilibrium *eq,
                                                 bool *certified,
                                                 double *potential,
                                                 double *worst_improvement,
                                                 size_t *iterations);

// Gain of `agent` at grid node `node`, column-major into `buf`.
// `rows`/`cols` receive the shape even when `buf` is too small, in which
// case the call fails with `POTENTIA_STATUS_INVALID_ARGUMENT`.
//
// # Safety
// `eq` must be a live handle; `buf` must be null or hold `len` doubles;
// `rows` and `cols` must be writable.
enum PotentiaStatus potentia_equilibrium_gain(const struct PotentiaEquilibrium *eq,
                                              size_t agent,
                                              size_t node,
                                              double *buf,
                                              size_t len,
                                              size_t *rows,
                                              size_t *cols);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* POTENTIA_H */
