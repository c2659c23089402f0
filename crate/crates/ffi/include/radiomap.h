#ifndef RADIOMAP_H
#define RADIOMAP_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum RmStatus {
  RM_STATUS_OK = 0,
  RM_STATUS_NULL_POINTER = 1,
  RM_STATUS_INVALID_ARGUMENT = 2,
  RM_STATUS_IO = 3,
  RM_STATUS_BAD_CHECKPOINT = 4,
  RM_STATUS_RUNTIME = 5,
  RM_STATUS_PANIC = 6,
} RmStatus;

/**
 * Trained model handle.
 */
typedef struct RmModel RmModel;

/**
 * Environment scene handle.
 */
typedef struct RmScene RmScene;

/**
 * Quality of one prediction against a reference.
 */
typedef struct RmMetrics {
  double nmse;
  double rmse;
  double ssim;
  /**
   * `INFINITY` for an exact match.
   */
  double psnr;
} RmMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *rm_version(void);

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call on the same thread.
 */
const char *rm_last_error(void);

/**
 * Builds a scene from two row-major `n*n` masks (nonzero = occupied) and a
 * transmitter cell.
 *
 * # Safety
 * `static_mask` and `dynamic_mask` must point to `n*n` readable bytes and
 * `out` to writable storage for one pointer.
 */
enum RmStatus rm_scene_new(size_t n,
                           const uint8_t *static_mask,
                           const uint8_t *dynamic_mask,
                           size_t bs_row,
                           size_t bs_col,
                           struct RmScene **out);

/**
 * # Safety
 * `scene` must come from [`rm_scene_new`] and not be used afterwards.
 */
void rm_scene_free(struct RmScene *scene);

/**
 * Side length of the scene grid, 0 for null.
 *
 * # Safety
 * `scene` must be null or a live handle.
 */
size_t rm_scene_size(const struct RmScene *scene);

/**
 * Ground-truth gray map from the built-in propagation oracle with default
 * parameters, written row-major into `out` (`len` must be `n*n`).
 *
 * # Safety
 * `scene` must be a live handle and `out` must hold `len` writable doubles.
 */
enum RmStatus rm_oracle_gray(const struct RmScene *scene, double *out, size_t len);

/**
 * Loads a diffusion checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum RmStatus rm_model_load(const char *path, struct RmModel **out);

/**
 * # Safety
 * `model` must come from [`rm_model_load`] and not be used afterwards.
 */
void rm_model_free(struct RmModel *model);

/**
 * Grid size the model was trained on, 0 for null.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t rm_model_image_size(const struct RmModel *model);

/**
 * Samples a gray map for `scene` with `steps` reverse steps. The result is
 * row-major in `out`, which must hold `n*n` values.
 *
 * # Safety
 * Both handles must be live and `out` must hold `len` writable doubles.
 */
enum RmStatus rm_model_infer(const struct RmModel *model,
                             const struct RmScene *scene,
                             size_t steps,
                             uint64_t seed,
                             double *out,
                             size_t len);

/**
 * NMSE, RMSE, SSIM and PSNR of two row-major `n*n` gray maps.
 *
 * # Safety
 * `pred` and `truth` must hold `n*n` readable doubles and `out` be writable.
 */
enum RmStatus rm_metrics(const double *pred, const double *truth, size_t n, struct RmMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RADIOMAP_H */
