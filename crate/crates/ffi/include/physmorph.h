#ifndef PHYSMORPH_H
#define PHYSMORPH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum PmStatus {
  PM_STATUS_OK = 0,
  PM_STATUS_NULL_POINTER = 1,
  PM_STATUS_INVALID_ARGUMENT = 2,
  PM_STATUS_CONFIG = 3,
  PM_STATUS_IO = 4,
  PM_STATUS_FORMAT = 5,
  PM_STATUS_NUMERIC = 6,
  PM_STATUS_BUFFER_TOO_SMALL = 7,
  PM_STATUS_PANIC = 8,
} PmStatus;

/**
 * Opaque engine handle.
 */
typedef struct PmEngine PmEngine;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty when none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *pm_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *pm_version(void);

/**
 * Creates an engine from JSON config text. Empty text gives the defaults.
 *
 * # Safety
 * `json` is a NUL-terminated string; `out` is valid for writing a pointer.
 */
enum PmStatus pm_engine_new_from_json(const char *json, struct PmEngine **out);

/**
 * Creates an engine from a config file.
 *
 * # Safety
 * `path` is a NUL-terminated string; `out` is valid for writing a pointer.
 */
enum PmStatus pm_engine_new_from_file(const char *path, struct PmEngine **out);

/**
 * Releases an engine. Null is ignored.
 *
 * # Safety
 * `engine` is null or was returned by `pm_engine_new_*` and not yet freed.
 */
void pm_engine_free(struct PmEngine *engine);

/**
 * Runs `count` training episodes.
 *
 * # Safety
 * `engine` is a live handle used by one thread at a time.
 */
enum PmStatus pm_engine_run_episodes(struct PmEngine *engine, size_t count);

/**
 * Episodes completed so far.
 *
 * # Safety
 * `engine` is a live handle; `out` is valid for writing.
 */
enum PmStatus pm_engine_episode(const struct PmEngine *engine, size_t *out);

/**
 * Number of anchor particles.
 *
 * # Safety
 * `engine` is a live handle; `out` is valid for writing.
 */
enum PmStatus pm_engine_particle_count(const struct PmEngine *engine, size_t *out);

/**
 * Physics loss of the last episode's end state; NaN before any episode.
 *
 * # Safety
 * `engine` is a live handle; `out` is valid for writing.
 */
enum PmStatus pm_engine_physics_loss(const struct PmEngine *engine, double *out);

/**
 * Copies current anchor positions as `x0 y0 z0 x1 ...` in grid units.
 * `len` is the capacity of `buf` in doubles and must be at least
 * `3 * particle_count`.
 *
 * # Safety
 * `engine` is a live handle; `buf` is valid for `len` doubles.
 */
enum PmStatus pm_engine_positions(const struct PmEngine *engine, double *buf, size_t len);

/**
 * Chamfer distance of the current state against the target surface.
 *
 * # Safety
 * `engine` is a live handle; `out` is valid for writing.
 */
enum PmStatus pm_engine_chamfer(const struct PmEngine *engine, double *out);

/**
 * Writes the current anchor state as a PMGS snapshot.
 *
 * # Safety
 * `engine` is a live handle; `path` is a NUL-terminated string.
 */
enum PmStatus pm_engine_save_snapshot(const struct PmEngine *engine, const char *path);

/**
 * Writes the training state for a later [`pm_engine_load_checkpoint`].
 *
 * # Safety
 * `engine` is a live handle; `path` is a NUL-terminated string.
 */
enum PmStatus pm_engine_save_checkpoint(const struct PmEngine *engine, const char *path);

/**
 * Restores a training state written by [`pm_engine_save_checkpoint`] for
 * the same config.
 *
 * # Safety
 * `engine` is a live handle used by one thread at a time; `path` is a
 * NUL-terminated string.
 */
enum PmStatus pm_engine_load_checkpoint(struct PmEngine *engine, const char *path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PHYSMORPH_H */
