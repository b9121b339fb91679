#ifndef VPSEG_H
#define VPSEG_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every call.
typedef enum VpsegStatus {
  VPSEG_STATUS_OK = 0,
  VPSEG_STATUS_SHAPE_ERROR = 1,
  VPSEG_STATUS_FORMAT_ERROR = 2,
  VPSEG_STATUS_RANGE_ERROR = 3,
  VPSEG_STATUS_CONFIG_ERROR = 4,
  VPSEG_STATUS_SAMPLING_ERROR = 5,
  VPSEG_STATUS_INTEGRITY_ERROR = 6,
  VPSEG_STATUS_CAPACITY_ERROR = 7,
  VPSEG_STATUS_NUMERIC_ERROR = 8,
  VPSEG_STATUS_CHECKPOINT_ERROR = 9,
  VPSEG_STATUS_ALIGNMENT_ERROR = 10,
  VPSEG_STATUS_CONTRACT_ERROR = 11,
  VPSEG_STATUS_IO_ERROR = 12,
  // A required pointer argument was null.
  VPSEG_STATUS_NULL_ARGUMENT = 13,
  // A string argument was not valid UTF-8.
  VPSEG_STATUS_INVALID_STRING = 14,
  // Internal panic; the handle involved should be discarded.
  VPSEG_STATUS_PANIC = 15,
} VpsegStatus;

// Streaming STQ accumulator over whole sequences.
typedef struct VpsegEvaluator VpsegEvaluator;

// A trained network with its run configuration.
typedef struct VpsegModel VpsegModel;

// Online tracker state for one sequence.
typedef struct VpsegTracker VpsegTracker;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf` (NUL
// terminated, truncated to `len`). Returns the full message length.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t vpseg_last_error_message(char *buf, size_t len);

// `sqrt(aq * sq)`; inputs must lie in [0, 1].
//
// # Safety
// `out` must be a valid pointer.
enum VpsegStatus vpseg_compute_stq(double aq, double sq, double *out);

// Loads a run configuration and a checkpoint.
//
// # Safety
// String arguments must be NUL-terminated; `out` must be a valid pointer.
enum VpsegStatus vpseg_model_load(const char *config_path,
                                  const char *checkpoint_path,
                                  struct VpsegModel **out);

// # Safety
// `model` must come from [`vpseg_model_load`] and not be used afterwards.
void vpseg_model_free(struct VpsegModel *model);

// Starts a sequence with the model's tracker settings.
//
// # Safety
// `model` must be a live handle; `out` must be a valid pointer.
enum VpsegStatus vpseg_tracker_new(const struct VpsegModel *model, struct VpsegTracker **out);

// Processes one frame of packed RGB8 pixels (`width * height * 3`
// bytes, row-major) and writes `width * height` semantic and instance
// ids. Void pixels get semantic 255.
//
// # Safety
// Handles must be live; `rgb` must hold `width * height * 3` bytes and
// each output buffer `width * height` elements.
enum VpsegStatus vpseg_tracker_step(struct VpsegTracker *tracker,
                                    const struct VpsegModel *model,
                                    const uint8_t *rgb,
                                    uint32_t width,
                                    uint32_t height,
                                    uint16_t *out_semantic,
                                    uint32_t *out_instance);

// Number of live tracks.
//
// # Safety
// `tracker` must be a live handle; `out` must be a valid pointer.
enum VpsegStatus vpseg_tracker_live_count(const struct VpsegTracker *tracker, size_t *out);

// # Safety
// `tracker` must come from [`vpseg_tracker_new`] and not be used afterwards.
void vpseg_tracker_free(struct VpsegTracker *tracker);

// `class_table_path` may be null for the built-in taxonomy.
//
// # Safety
// `class_table_path` must be null or NUL-terminated; `out` must be valid.
enum VpsegStatus vpseg_evaluator_new(const char *class_table_path, struct VpsegEvaluator **out);

// Adds one sequence of `frames` maps, each `width * height` ids,
// concatenated frame after frame. Sequence names must be unique.
//
// # Safety
// `name` must be NUL-terminated; each id buffer must hold
// `frames * width * height` elements.
enum VpsegStatus vpseg_evaluator_add_sequence(struct VpsegEvaluator *evaluator,
                                              const char *name,
                                              size_t frames,
                                              uint32_t width,
                                              uint32_t height,
                                              const uint16_t *pred_semantic,
                                              const uint32_t *pred_instance,
                                              const uint16_t *gt_semantic,
                                              const uint32_t *gt_instance);

// Current STQ, AQ and SQ over every added sequence.
//
// # Safety
// `evaluator` must be live; output pointers must be valid.
enum VpsegStatus vpseg_evaluator_report(const struct VpsegEvaluator *evaluator,
                                        double *stq,
                                        double *aq,
                                        double *sq);

// # Safety
// `evaluator` must come from [`vpseg_evaluator_new`] and not be used afterwards.
void vpseg_evaluator_free(struct VpsegEvaluator *evaluator);

// Runs training as configured; writes the checkpoint and log into the
// configured output directory.
//
// # Safety
// `config_path` must be NUL-terminated.
enum VpsegStatus vpseg_train(const char *config_path);

// Scores `pred_root` against `gt_root` (dataset layout). `class_table_path`
// and `report_dir` may be null.
//
// # Safety
// Strings must be NUL-terminated or null where allowed; outputs valid.
enum VpsegStatus vpseg_eval_dirs(const char *pred_root,
                                 const char *gt_root,
                                 const char *class_table_path,
                                 const char *report_dir,
                                 double *stq,
                                 double *aq,
                                 double *sq);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VPSEG_H */
