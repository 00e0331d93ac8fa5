#include <stdio.h>
#include "potentia.h"

int main(int argc, char **argv) {
    PotentiaGame *game = NULL;
    if (potentia_game_load(argv[1], &game) != POTENTIA_STATUS_OK) {
        char msg[256];
        potentia_last_error(msg, sizeof msg);
        fprintf(stderr, "%s\n", msg);
        return 1;
    }
    PotentiaVerdict verdict;
    if (potentia_verify(game, 8, 0, &verdict, NULL) != POTENTIA_STATUS_OK) return 1;
    double v = 0.0;
    if (potentia_value(game, 0, &v) != POTENTIA_STATUS_OK) return 1;
    PotentiaGame *missing = NULL;
    PotentiaStatus s = potentia_game_load("/nonexistent.toml", &missing);
    printf("%d %.6f %d %d\n", (int)verdict, v, (int)s, potentia_last_error(NULL, 0) > 1);
    potentia_game_free(game);
    return 0;
}
