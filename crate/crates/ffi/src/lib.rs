//! C ABI over the potentia toolkit.
//!
//! Games and equilibria are opaque handles owned by the caller and released
//! with the matching `*_free`. Every fallible call returns a
//! [`PotentiaStatus`]; the message of the last failure on the calling thread
//! is available through [`potentia_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use nalgebra::DMatrix;
use potentia::cli::potential_for;
use potentia::io::{load_game, parse_game, Format, GameFile};
use potentia::nash::{solve_nash, NashOptions, VerifyOptions};
use potentia::ode::{solve_psi, InitialState};
use potentia::potential::{check_symmetry, SymmetryOptions, Verdict, DEFAULT_N_QUAD};
use potentia::{Error, PolicyProfile};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PotentiaStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    InvalidSpec = 4,
    InvalidArgument = 5,
    NotPotential = 6,
    Numerical = 7,
    Io = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PotentiaVerdict {
    Mpg = 0,
    ClpgAt = 1,
    NotPotential = 2,
}

/// A parsed game together with its starting profile and initial state.
pub struct PotentiaGame {
    file: GameFile,
    profile: PolicyProfile,
    initial: InitialState,
}

/// Result of a potential descent.
pub struct PotentiaEquilibrium {
    profile: PolicyProfile,
    potential: f64,
    worst_improvement: f64,
    certified: bool,
    iterations: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> PotentiaStatus {
    match e {
        Error::Parse { .. } => PotentiaStatus::Parse,
        Error::InvalidSpec(_) | Error::Dimension(_) => PotentiaStatus::InvalidSpec,
        Error::InvalidArgument(_) | Error::OutOfRange { .. } => PotentiaStatus::InvalidArgument,
        Error::NotPotential(_) | Error::HessianAsymmetry { .. } => PotentiaStatus::NotPotential,
        Error::Io(_) => PotentiaStatus::Io,
        _ => PotentiaStatus::Numerical,
    }
}

struct Fail(PotentiaStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(PotentiaStatus::NullArgument, format!("{what} is null"))
}

/// Run `f`, recording any failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PotentiaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PotentiaStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            PotentiaStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(PotentiaStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn game_ref<'a>(g: *const PotentiaGame) -> Result<&'a PotentiaGame, Fail> {
    g.as_ref().ok_or_else(|| null("game"))
}

fn wrap(file: GameFile) -> Box<PotentiaGame> {
    let profile = file.policy.clone().unwrap_or_else(|| PolicyProfile::zeros(&file.spec));
    let n = file.spec.state_dim();
    let initial = file.initial.clone().unwrap_or_else(|| InitialState::Moment {
        t0: file.spec.grid.t0(),
        m0: DMatrix::identity(n, n),
    });
    Box::new(PotentiaGame { file, profile, initial })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn potentia_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copy the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the length the full message needs,
/// including the terminator; 0 when there is no error.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn potentia_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if msg.is_empty() {
            return 0;
        }
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len() + 1
    })
}

/// Load a game file (TOML, or JSON for a `.json` extension).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn potentia_game_load(path: *const c_char, out: *mut *mut PotentiaGame) -> PotentiaStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = Box::into_raw(wrap(load_game(Path::new(path))?.0));
        Ok(())
    })
}

/// Parse a game from text; `json` non-zero selects JSON, otherwise TOML.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn potentia_game_parse(
    text: *const c_char,
    json: c_int,
    out: *mut *mut PotentiaGame,
) -> PotentiaStatus {
    guard(|| {
        let text = str_arg(text, "text")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let format = if json != 0 { Format::Json } else { Format::Toml };
        *out = Box::into_raw(wrap(parse_game(text, format)?));
        Ok(())
    })
}

/// # Safety
/// `game` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn potentia_game_free(game: *mut PotentiaGame) {
    if !game.is_null() {
        drop(Box::from_raw(game));
    }
}

/// Number of agents, state dimension and grid nodes. Any output may be null.
///
/// # Safety
/// `game` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn potentia_game_dims(
    game: *const PotentiaGame,
    n_agents: *mut usize,
    state_dim: *mut usize,
    nodes: *mut usize,
) -> PotentiaStatus {
    guard(|| {
        let spec = &game_ref(game)?.file.spec;
        for (p, v) in [(n_agents, spec.n_agents()), (state_dim, spec.state_dim()), (nodes, spec.grid.len())] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Symmetric-Jacobian test around the game's policy (zero if none).
/// `max_discrepancy` may be null.
///
/// # Safety
/// `game` must be a live handle; `verdict` must be writable.
#[no_mangle]
pub unsafe extern "C" fn potentia_verify(
    game: *const PotentiaGame,
    probes: usize,
    seed: u64,
    verdict: *mut PotentiaVerdict,
    max_discrepancy: *mut f64,
) -> PotentiaStatus {
    guard(|| {
        let g = game_ref(game)?;
        if verdict.is_null() {
            return Err(null("verdict"));
        }
        let opts = SymmetryOptions {
            probes,
            seed,
            ..SymmetryOptions::default()
        };
        let report = check_symmetry(&g.file.spec, &g.profile, &opts)?;
        *verdict = match report.verdict {
            Verdict::Mpg => PotentiaVerdict::Mpg,
            Verdict::ClpgAt => PotentiaVerdict::ClpgAt,
            Verdict::NotPotential => PotentiaVerdict::NotPotential,
        };
        if !max_discrepancy.is_null() {
            *max_discrepancy = report.max_discrepancy();
        }
        Ok(())
    })
}

/// Expected cost of `agent` under the game's policy and initial state.
///
/// # Safety
/// `game` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn potentia_value(game: *const PotentiaGame, agent: usize, out: *mut f64) -> PotentiaStatus {
    guard(|| {
        let g = game_ref(game)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let n = g.file.spec.n_agents();
        if agent >= n {
            return Err(Fail(PotentiaStatus::InvalidArgument, format!("agent {agent} out of range (0..{n})")));
        }
        *out = solve_psi(&g.file.spec, &g.profile, agent)?.expect(&g.initial)?;
        Ok(())
    })
}

/// Minimise the game's potential from its policy and certify the result.
/// `max_iter == 0` and `tol <= 0` select the defaults. Refuses games that
/// fail the symmetry test with `POTENTIA_STATUS_NOT_POTENTIAL`.
///
/// # Safety
/// `game` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn potentia_nash_solve(
    game: *const PotentiaGame,
    max_iter: usize,
    tol: f64,
    seed: u64,
    out: *mut *mut PotentiaEquilibrium,
) -> PotentiaStatus {
    guard(|| {
        let g = game_ref(game)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let sym = SymmetryOptions {
            seed,
            ..SymmetryOptions::default()
        };
        let pot = potential_for(&g.file, g.profile.clone(), DEFAULT_N_QUAD, &sym, false)?;
        let defaults = NashOptions::default();
        let opts = NashOptions {
            max_iter: if max_iter == 0 { defaults.max_iter } else { max_iter },
            tol: if tol > 0.0 { tol } else { defaults.tol },
            verify: VerifyOptions {
                seed,
                ..VerifyOptions::default()
            },
            ..defaults
        };
        let res = solve_nash(&g.file.spec, &pot.potential, &g.profile, &g.initial, &opts)?;
        let cert = res.certificate;
        *out = Box::into_raw(Box::new(PotentiaEquilibrium {
            worst_improvement: cert.worst_improvement(),
            certified: cert.certified,
            iterations: cert.iterations.unwrap_or(0),
            profile: cert.profile,
            potential: res.potential,
        }));
        Ok(())
    })
}

/// # Safety
/// `eq` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn potentia_equilibrium_free(eq: *mut PotentiaEquilibrium) {
    if !eq.is_null() {
        drop(Box::from_raw(eq));
    }
}

/// Summary of a solve. Any output may be null.
///
/// # Safety
/// `eq` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn potentia_equilibrium_summary(
    eq: *const PotentiaEquilibrium,
    certified: *mut bool,
    potential: *mut f64,
    worst_improvement: *mut f64,
    iterations: *mut usize,
) -> PotentiaStatus {
    guard(|| {
        let e = eq.as_ref().ok_or_else(|| null("equilibrium"))?;
        if !certified.is_null() {
            *certified = e.certified;
        }
        for (p, v) in [(potential, e.potential), (worst_improvement, e.worst_improvement)] {
            if !p.is_null() {
                *p = v;
            }
        }
        if !iterations.is_null() {
            *iterations = e.iterations;
        }
        Ok(())
    })
}

/// Gain of `agent` at grid node `node`, column-major into `buf`.
/// `rows`/`cols` receive the shape even when `buf` is too small, in which
/// case the call fails with `POTENTIA_STATUS_INVALID_ARGUMENT`.
///
/// # Safety
/// `eq` must be a live handle; `buf` must be null or hold `len` doubles;
/// `rows` and `cols` must be writable.
#[no_mangle]
pub unsafe extern "C" fn potentia_equilibrium_gain(
    eq: *const PotentiaEquilibrium,
    agent: usize,
    node: usize,
    buf: *mut f64,
    len: usize,
    rows: *mut usize,
    cols: *mut usize,
) -> PotentiaStatus {
    guard(|| {
        let e = eq.as_ref().ok_or_else(|| null("equilibrium"))?;
        if rows.is_null() || cols.is_null() {
            return Err(null("rows/cols"));
        }
        let series = e.profile.gains.get(agent).ok_or_else(|| {
            Fail(PotentiaStatus::InvalidArgument, format!("agent {agent} out of range"))
        })?;
        if node >= series.len() {
            return Err(Fail(PotentiaStatus::InvalidArgument, format!("node {node} out of range")));
        }
        let k = series.node(node);
        *rows = k.nrows();
        *cols = k.ncols();
        if buf.is_null() || len < k.len() {
            return Err(Fail(
                PotentiaStatus::InvalidArgument,
                format!("buffer holds {len} values, gain needs {}", k.len()),
            ));
        }
        std::ptr::copy_nonoverlapping(k.as_slice().as_ptr(), buf, k.len());
        Ok(())
    })
}
