#ifndef MODALNET_H
#define MODALNET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Attention applied to every connection of a freshly built model.
 */
typedef enum MnAttention {
  MN_ATTENTION_NONE = 0,
  MN_ATTENTION_STATIC = 1,
  MN_ATTENTION_SELF_ATTENTION = 2,
  MN_ATTENTION_ONE_SHOT = 3,
} MnAttention;

/**
 * Input streams, in the order `mn_model_forward` takes them.
 */
typedef enum MnModality {
  MN_MODALITY_RGB = 0,
  MN_MODALITY_FLOW = 1,
  MN_MODALITY_OBJECT = 2,
} MnModality;

/**
 * Result codes. Zero is success.
 */
typedef enum MnStatus {
  MN_STATUS_OK = 0,
  MN_STATUS_NULL_POINTER = 1,
  MN_STATUS_INVALID_UTF8 = 2,
  MN_STATUS_SHAPE = 3,
  MN_STATUS_NUMERIC = 4,
  MN_STATUS_LABEL = 5,
  MN_STATUS_TABLE = 6,
  MN_STATUS_GRAPH = 7,
  MN_STATUS_RESOLUTION = 8,
  MN_STATUS_INPUT = 9,
  MN_STATUS_CONFIG = 10,
  MN_STATUS_CHECKPOINT = 11,
  MN_STATUS_IO = 12,
  MN_STATUS_BUFFER_TOO_SMALL = 13,
  MN_STATUS_PANIC = 14,
} MnStatus;

/**
 * Opaque model handle.
 */
typedef struct MnModel MnModel;

typedef struct MnBuildOptions {
  uint64_t width_num;
  uint64_t width_den;
  size_t frames;
  size_t height;
  size_t width;
  /**
   * Zero keeps the table's value.
   */
  size_t num_classes;
  /**
   * Zero keeps the table's value.
   */
  size_t object_channels;
  enum MnAttention attention;
  uint64_t seed;
} MnBuildOptions;

typedef struct MnCost {
  uint64_t total_params;
  uint64_t total_flops;
  double attention_param_ratio;
  double attention_flops_ratio;
} MnCost;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Defaults matching the library: width 1/8, 4 frames of 16x16, no attention.
 */
struct MnBuildOptions mn_build_options_default(void);

/**
 * Builds a model from a JSON architecture table, or from the built-in
 * table when `table_json` is null.
 *
 * # Safety
 * `table_json` must be null or a NUL-terminated string; `opts` and `out`
 * must be valid pointers.
 */
enum MnStatus mn_model_build(const char *table_json,
                             const struct MnBuildOptions *opts,
                             struct MnModel **out);

/**
 * Loads a model saved under `dir` with file stem `stem`.
 *
 * # Safety
 * `dir` and `stem` must be NUL-terminated strings; `out` must be valid.
 */
enum MnStatus mn_model_load(const char *dir, const char *stem, struct MnModel **out);

/**
 * # Safety
 * `model` must come from this library; `dir` and `stem` must be
 * NUL-terminated strings.
 */
enum MnStatus mn_model_save(const struct MnModel *model, const char *dir, const char *stem);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void mn_model_free(struct MnModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` valid.
 */
enum MnStatus mn_model_num_classes(const struct MnModel *model, size_t *out);

/**
 * Channel count the model expects for `modality`.
 *
 * # Safety
 * `model` must be a live handle and `out` valid.
 */
enum MnStatus mn_model_input_channels(const struct MnModel *model,
                                      enum MnModality modality,
                                      size_t *out);

/**
 * # Safety
 * `model` must be a live handle and `out` valid.
 */
enum MnStatus mn_model_param_count(const struct MnModel *model, uint64_t *out);

/**
 * Runs the model on `batch` clips of `frames` frames at the model's
 * configured size. Inputs are `(N, T, H, W, C)` row-major with channels
 * fastest; a null stream is treated as absent. Writes `batch * classes`
 * logits to `logits`.
 *
 * # Safety
 * Every non-null input pointer must reference `*_len` readable doubles;
 * `logits` must reference `logits_len` writable doubles.
 */
enum MnStatus mn_model_forward(const struct MnModel *model,
                               size_t batch,
                               size_t frames,
                               const double *rgb,
                               size_t rgb_len,
                               const double *flow,
                               size_t flow_len,
                               const double *object,
                               size_t object_len,
                               double *logits,
                               size_t logits_len);

/**
 * Static cost accounting for `batch` clips of `frames` frames.
 *
 * # Safety
 * `model` must be a live handle and `out` valid.
 */
enum MnStatus mn_model_cost(const struct MnModel *model,
                            size_t batch,
                            size_t frames,
                            struct MnCost *out);

/**
 * Writes the model's connectivity as Graphviz DOT to `path`.
 *
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum MnStatus mn_model_export_dot(const struct MnModel *model, const char *path);

/**
 * Copies the calling thread's last error message, NUL-terminated and
 * truncated to fit, into `buf`. Returns the full message length.
 *
 * # Safety
 * `buf` must be null or reference `len` writable bytes.
 */
size_t mn_last_error(char *buf, size_t len);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* MODALNET_H */
