#ifndef PWRF_H
#define PWRF_H

/* Generated by cbindgen from the pwrf-ffi crate; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every function of the C ABI.
 */
typedef enum PwrfStatus {
  PWRF_STATUS_OK = 0,
  PWRF_STATUS_NULL_POINTER = 1,
  PWRF_STATUS_INVALID_UTF8 = 2,
  PWRF_STATUS_DIMENSION = 10,
  PWRF_STATUS_CONTRACT = 11,
  PWRF_STATUS_NON_FINITE = 12,
  PWRF_STATUS_CONFIG = 13,
  PWRF_STATUS_DIVERGENCE = 14,
  PWRF_STATUS_FORMAT = 15,
  PWRF_STATUS_IO = 16,
  PWRF_STATUS_JSON = 17,
  PWRF_STATUS_PANIC = 99,
} PwrfStatus;

/**
 * Task identifiers reported by [`pwrf_model_info`].
 */
typedef enum PwrfTask {
  PWRF_TASK_SEGMENTATION = 0,
  PWRF_TASK_SALIENCY = 1,
} PwrfTask;

/**
 * Opaque model handle.
 */
typedef struct PwrfModel PwrfModel;

/**
 * Shape information of a loaded model.
 */
typedef struct PwrfModelInfo {
  uint32_t task;
  /**
   * Side of the square input images.
   */
  size_t size;
  /**
   * Number of input images expected by [`pwrf_model_predict`].
   */
  size_t modalities;
  /**
   * Image channels per input pixel.
   */
  size_t input_channels;
  /**
   * Values per output pixel: class logits or one saliency value.
   */
  size_t output_channels;
} PwrfModelInfo;

/**
 * Saliency metrics of one prediction.
 */
typedef struct PwrfSaliencyMetrics {
  double mae;
  double f_adaptive;
  double f_mean;
  double e_adaptive;
  double e_mean;
  double s_measure;
  /**
   * Non-zero when the ground truth has no foreground pixel.
   */
  int32_t empty_gt;
} PwrfSaliencyMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on this thread.
 */
const char *pwrf_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *pwrf_version(void);

/**
 * Loads a checkpoint directory into a new handle stored in `*out`.
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PwrfStatus pwrf_model_load(const char *dir, struct PwrfModel **out);

/**
 * Builds a freshly initialised model from a JSON configuration.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PwrfStatus pwrf_model_from_config(const char *config_json, struct PwrfModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void pwrf_model_free(struct PwrfModel *model);

/**
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum PwrfStatus pwrf_model_info(const struct PwrfModel *model, struct PwrfModelInfo *out);

/**
 * Runs a forward pass.
 *
 * `images` holds the modality images back to back, each `size*size*input_channels`
 * values in row-major `[row][col][channel]` order. `out` receives
 * `size*size*output_channels` values.
 *
 * # Safety
 * `images` must point to `images_len` doubles and `out` to `out_len` writable doubles.
 */
enum PwrfStatus pwrf_model_predict(const struct PwrfModel *model,
                                   const double *images,
                                   size_t images_len,
                                   double *out,
                                   size_t out_len);

/**
 * Routing explanation of pixel `(row, col)` at backbone `stage` as a JSON
 * string, to be released with [`pwrf_string_free`].
 *
 * # Safety
 * Same buffer rules as [`pwrf_model_predict`]; `json_out` must be valid.
 */
enum PwrfStatus pwrf_model_explain(const struct PwrfModel *model,
                                   const double *images,
                                   size_t images_len,
                                   size_t stage,
                                   size_t row,
                                   size_t col,
                                   char **json_out);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void pwrf_string_free(char *s);

/**
 * Saliency metrics of an `height*width` prediction in `[0,1]` against a binary ground truth.
 *
 * # Safety
 * `pred` and `gt` must point to `height*width` doubles; `out` must be valid.
 */
enum PwrfStatus pwrf_saliency_metrics(const double *pred,
                                      const double *gt,
                                      size_t height,
                                      size_t width,
                                      double beta2,
                                      double alpha,
                                      struct PwrfSaliencyMetrics *out);

/**
 * Mean intersection-over-union of two class maps of `len` pixels.
 *
 * # Safety
 * `pred` and `gt` must point to `len` values; `out` must be valid.
 */
enum PwrfStatus pwrf_miou(const uint32_t *pred,
                          const uint32_t *gt,
                          size_t len,
                          size_t classes,
                          double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PWRF_H */
