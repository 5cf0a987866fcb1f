#ifndef SIAMTRACK_H
#define SIAMTRACK_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum SiamStatus {
  SIAM_STATUS_OK = 0,
  SIAM_STATUS_NULL_POINTER = 1,
  SIAM_STATUS_INVALID_ARGUMENT = 2,
  SIAM_STATUS_IO = 3,
  SIAM_STATUS_FORMAT = 4,
  SIAM_STATUS_CONFIG = 5,
  SIAM_STATUS_SHAPE = 6,
  SIAM_STATUS_NUMERIC = 7,
  SIAM_STATUS_PANIC = 8,
} SiamStatus;

/**
 * Network weights and configuration. Shareable across trackers.
 */
typedef struct SiamModel SiamModel;

/**
 * Per-target tracking state bound to one model.
 */
typedef struct SiamTracker SiamTracker;

/**
 * Axis-aligned box, top-left corner plus size, in pixels.
 */
typedef struct SiamBox {
  double x;
  double y;
  double w;
  double h;
} SiamBox;

/**
 * Headline numbers of a one-pass evaluation.
 */
typedef struct SiamOpeSummary {
  double precision_at_20;
  double success_auc;
} SiamOpeSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the last failure on this thread. Valid until the
 * next failing call on the same thread.
 */
const char *siam_last_error(void);

/**
 * Fresh model from a JSON configuration (NULL for defaults) and a weight
 * seed.
 *
 * # Safety
 * `config_json` must be NULL or a valid C string; `out` must be writable.
 */
enum SiamStatus siam_model_new(const char *config_json, uint64_t seed, struct SiamModel **out);

/**
 * Load a checkpoint written by `siam_model_save` or the CLI.
 *
 * # Safety
 * `path` must be a valid C string; `out` must be writable.
 */
enum SiamStatus siam_model_load(const char *path, struct SiamModel **out);

/**
 * # Safety
 * `model` must come from this library; `path` must be a valid C string.
 */
enum SiamStatus siam_model_save(const struct SiamModel *model, const char *path);

/**
 * Number of scalar parameters, or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or come from this library.
 */
uint64_t siam_model_num_params(const struct SiamModel *model);

/**
 * # Safety
 * `model` must be NULL or come from this library and not be used again.
 */
void siam_model_free(struct SiamModel *model);

/**
 * Start tracking `init` in an interleaved RGB frame. The tracker keeps
 * its own reference to the model.
 *
 * # Safety
 * `model` must come from this library, `rgb` must hold
 * `width * height * 3` bytes and `out` must be writable.
 */
enum SiamStatus siam_tracker_new(const struct SiamModel *model,
                                 const uint8_t *rgb,
                                 size_t width,
                                 size_t height,
                                 struct SiamBox init,
                                 struct SiamTracker **out);

/**
 * Locate the target in the next frame.
 *
 * # Safety
 * `tracker` must come from this library, `rgb` must hold
 * `width * height * 3` bytes; `out_box` must be writable and `out_score`
 * NULL or writable.
 */
enum SiamStatus siam_tracker_update(struct SiamTracker *tracker,
                                    const uint8_t *rgb,
                                    size_t width,
                                    size_t height,
                                    struct SiamBox *out_box,
                                    double *out_score);

/**
 * # Safety
 * `tracker` must be NULL or come from this library and not be used again.
 */
void siam_tracker_free(struct SiamTracker *tracker);

/**
 * Intersection over union of two boxes.
 */
double siam_iou(struct SiamBox a, struct SiamBox b);

/**
 * IoU loss `-(1 - iou)(alpha - iou) ln(iou)`; `alpha` must lie in (1, 2].
 *
 * # Safety
 * `out` must be writable.
 */
enum SiamStatus siam_l_ious(double iou, double alpha, double *out);

/**
 * Precision at 20 px and success AUC of `len` predictions.
 *
 * # Safety
 * `pred` and `gt` must each point to `len` boxes; `out` must be writable.
 */
enum SiamStatus siam_eval_ope(const struct SiamBox *pred,
                              const struct SiamBox *gt,
                              size_t len,
                              struct SiamOpeSummary *out);

/**
 * Library version as a static C string.
 */
const char *siam_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SIAMTRACK_H */
