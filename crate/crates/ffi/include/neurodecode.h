#ifndef NEURODECODE_H
#define NEURODECODE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum NdStatus {
  ND_STATUS_OK = 0,
  ND_STATUS_NULL_POINTER = 1,
  ND_STATUS_INVALID_UTF8 = 2,
  ND_STATUS_INVALID_ARGUMENT = 3,
  ND_STATUS_CONFIG = 4,
  ND_STATUS_MISSING_ARTIFACT = 5,
  ND_STATUS_NUMERICAL = 6,
  ND_STATUS_LOCKED = 7,
  ND_STATUS_IO = 8,
  ND_STATUS_FORMAT = 9,
  ND_STATUS_PANIC = 10,
} NdStatus;

/**
 * Opaque experiment configuration.
 */
typedef struct NdConfig NdConfig;

/**
 * Opaque run directory.
 */
typedef struct NdRun NdRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the calling thread's most recent failure, or null. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *nd_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *nd_version(void);

/**
 * Default desk configuration. Free with [`nd_config_free`].
 */
struct NdConfig *nd_config_default(void);

/**
 * Loads a JSON config file into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum NdStatus nd_config_from_file(const char *path, struct NdConfig **out);

/**
 * Applies one `key=value` override with a dotted key.
 *
 * # Safety
 * `config` must come from this library; `assignment` must be a
 * NUL-terminated string.
 */
enum NdStatus nd_config_set(struct NdConfig *config, const char *assignment);

/**
 * Writes the config hash (64 hex characters plus NUL) into `buf`.
 *
 * # Safety
 * `config` must come from this library; `buf` must hold `len` bytes.
 */
enum NdStatus nd_config_hash(const struct NdConfig *config, char *buf, size_t len);

/**
 * # Safety
 * `config` must come from this library or be null.
 */
void nd_config_free(struct NdConfig *config);

/**
 * Opens (without creating) a run directory handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum NdStatus nd_run_open(const char *path, struct NdRun **out);

/**
 * Runs one stage by name (`synth`, `preprocess`, ..., `report`). Sets
 * `*cached` to 1 when the stage was already current and 0 otherwise.
 *
 * # Safety
 * Handles must come from this library; `stage` must be NUL-terminated;
 * `cached` may be null.
 */
enum NdStatus nd_run_stage(const struct NdRun *run,
                           const struct NdConfig *config,
                           const char *stage,
                           int32_t *cached);

/**
 * Reads one value from the run's `metrics.json`.
 *
 * # Safety
 * `run` must come from this library; `name` must be NUL-terminated;
 * `out` must be valid.
 */
enum NdStatus nd_run_metric(const struct NdRun *run, const char *name, double *out);

/**
 * # Safety
 * `run` must come from this library or be null.
 */
void nd_run_free(struct NdRun *run);

/**
 * Symmetric contrastive loss of two row-major `[n × d]` batches of unit
 * rows at temperature `tau`.
 *
 * # Safety
 * `z1` and `z2` must each point to `n * d` doubles; `out` must be valid.
 */
enum NdStatus nd_clip_loss(const double *z1,
                           const double *z2,
                           size_t n,
                           size_t d,
                           double tau,
                           double *out);

/**
 * Mean of `1 − cos(u_i, v_j)` over all row pairs of `[nu × d]` and
 * `[nv × d]` row-major matrices.
 *
 * # Safety
 * `u` must hold `nu * d` doubles, `v` must hold `nv * d`; `out` must be valid.
 */
enum NdStatus nd_mean_cosine_distance(const double *u,
                                      size_t nu,
                                      const double *v,
                                      size_t nv,
                                      size_t d,
                                      double *out);

/**
 * Pixel correlation and SSIM of two `[h × w × 3]` row-major images with
 * values in `[0, 1]`. Either output pointer may be null.
 *
 * # Safety
 * `a` and `b` must each hold `h * w * 3` doubles.
 */
enum NdStatus nd_image_similarity(const double *a,
                                  const double *b,
                                  size_t h,
                                  size_t w,
                                  double *pixcorr,
                                  double *ssim);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NEURODECODE_H */
