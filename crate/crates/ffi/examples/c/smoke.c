/* Trains a config for a few episodes and prints the physics loss.
 *
 *   cc smoke.c -I../../include -L<target>/debug -lphysmorph_ffi -o smoke
 *   ./smoke config.json 2
 */
#include <stdio.h>
#include <stdlib.h>

#include "physmorph.h"

static int check(PmStatus s, const char *what) {
  if (s != PM_STATUS_OK) {
    fprintf(stderr, "%s failed (%d): %s\n", what, (int)s, pm_last_error());
    return 1;
  }
  return 0;
}

int main(int argc, char **argv) {
  if (argc < 2) {
    fprintf(stderr, "usage: %s CONFIG [EPISODES]\n", argv[0]);
    return 2;
  }
  size_t episodes = argc > 2 ? (size_t)strtoul(argv[2], NULL, 10) : 1;
  PmEngine *engine = NULL;
  if (check(pm_engine_new_from_file(argv[1], &engine), "create")) return 1;

  int rc = 0;
  size_t n = 0;
  double loss = 0.0;
  if (check(pm_engine_run_episodes(engine, episodes), "train") ||
      check(pm_engine_particle_count(engine, &n), "count") ||
      check(pm_engine_physics_loss(engine, &loss), "loss")) {
    rc = 1;
  } else {
    double *xyz = malloc(3 * n * sizeof(double));
    if (check(pm_engine_positions(engine, xyz, 3 * n), "positions")) {
      rc = 1;
    } else {
      printf("physmorph %s particles %zu physics_loss %.6e first %.4f %.4f %.4f\n", pm_version(), n, loss,
             xyz[0], xyz[1], xyz[2]);
    }
    free(xyz);
  }
  pm_engine_free(engine);
  return rc;
}
