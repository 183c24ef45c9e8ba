#ifndef DSMOE_H
#define DSMOE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DsmoeSolver {
  DSMOE_SOLVER_EULER = 0,
  DSMOE_SOLVER_HEUN = 1,
} DsmoeSolver;

typedef enum DsmoeStatus {
  DSMOE_STATUS_OK = 0,
  DSMOE_STATUS_NULL_POINTER = 1,
  DSMOE_STATUS_INVALID_ARGUMENT = 2,
  DSMOE_STATUS_INVALID_CONFIG = 3,
  DSMOE_STATUS_IO = 4,
  DSMOE_STATUS_CORRUPT_CHECKPOINT = 5,
  DSMOE_STATUS_NON_FINITE = 6,
  DSMOE_STATUS_RUNTIME = 7,
  DSMOE_STATUS_PANIC = 8,
} DsmoeStatus;

/**
 * Opaque model configuration.
 */
typedef struct DsmoeConfig DsmoeConfig;

/**
 * Opaque model with its routing state.
 */
typedef struct DsmoeModel DsmoeModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until
 * the next call into this library on the same thread.
 */
const char *dsmoe_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *dsmoe_version(void);

/**
 * Looks up a built-in preset by name, e.g. `"dsmoe-s-e16"`.
 *
 * # Safety
 * `name` must be a NUL-terminated string; `out` must be writable.
 */
enum DsmoeStatus dsmoe_config_preset(const char *name, struct DsmoeConfig **out);

/**
 * Loads a TOML config file (or falls back to a preset of the same stem).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum DsmoeStatus dsmoe_config_load(const char *path, struct DsmoeConfig **out);

/**
 * # Safety
 * `config` must come from this library or be null.
 */
void dsmoe_config_free(struct DsmoeConfig *config);

/**
 * Returns `DSMOE_STATUS_INVALID_CONFIG` with the full violation list as
 * the error message when the config breaks a constraint.
 *
 * # Safety
 * `config` must be a live handle.
 */
enum DsmoeStatus dsmoe_config_validate(const struct DsmoeConfig *config);

/**
 * # Safety
 * `config` must be a live handle; `total` and `activated` writable.
 */
enum DsmoeStatus dsmoe_config_count_params(const struct DsmoeConfig *config,
                                           uint64_t *total,
                                           uint64_t *activated);

/**
 * Freshly initialized model.
 *
 * # Safety
 * `config` must be a live handle; `out` writable.
 */
enum DsmoeStatus dsmoe_model_new(const struct DsmoeConfig *config,
                                 uint64_t seed,
                                 struct DsmoeModel **out);

/**
 * Model from a checkpoint; `use_ema` selects the EMA weights.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` writable.
 */
enum DsmoeStatus dsmoe_model_load(const char *path, bool use_ema, struct DsmoeModel **out);

/**
 * # Safety
 * `model` must come from this library or be null.
 */
void dsmoe_model_free(struct DsmoeModel *model);

/**
 * Image shape `[channels, height, width]` and the null class label.
 *
 * # Safety
 * `model` must be a live handle; all outputs writable.
 */
enum DsmoeStatus dsmoe_model_image_shape(const struct DsmoeModel *model,
                                         size_t *channels,
                                         size_t *height,
                                         size_t *width,
                                         size_t *null_class);

/**
 * Velocity prediction for `batch` images `x` (`[B×C×H×W]`, row-major) at
 * per-image times `t` with labels `classes`. Writes `B·C·H·W` values.
 *
 * # Safety
 * Buffers must hold the stated number of elements.
 */
enum DsmoeStatus dsmoe_model_forward(struct DsmoeModel *model,
                                     const double *x,
                                     size_t batch,
                                     const double *t,
                                     const size_t *classes,
                                     double *out,
                                     size_t out_len);

/**
 * Generates one image per label, integrating from seeded Gaussian noise.
 * `cfg_lo`/`cfg_hi` bound the guidance interval; pass a negative `cfg_lo`
 * to guide at every step.
 *
 * # Safety
 * `classes` holds `batch` labels; `out` holds `out_len` values.
 */
enum DsmoeStatus dsmoe_model_sample(struct DsmoeModel *model,
                                    const size_t *classes,
                                    size_t batch,
                                    enum DsmoeSolver solver,
                                    size_t steps,
                                    double cfg_scale,
                                    double cfg_lo,
                                    double cfg_hi,
                                    uint64_t seed,
                                    double *out,
                                    size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DSMOE_H */
