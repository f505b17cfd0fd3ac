/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef CGRSEG_H
#define CGRSEG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CgrStatus {
  CGR_STATUS_OK = 0,
  CGR_STATUS_NULL_POINTER = 1,
  CGR_STATUS_INVALID_ARGUMENT = 2,
  CGR_STATUS_CONFIG = 3,
  CGR_STATUS_SHAPE = 4,
  CGR_STATUS_NUMERICAL = 5,
  CGR_STATUS_IO = 6,
  CGR_STATUS_FORMAT = 7,
  CGR_STATUS_WEIGHT_MISMATCH = 8,
  CGR_STATUS_UNKNOWN_STAGE = 9,
  CGR_STATUS_PANIC = 10,
} CgrStatus;

/**
 * Opaque model handle.
 */
typedef struct CgrModel CgrModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or an empty string. The
 * pointer stays valid until the next call on the same thread.
 */
const char *cgr_last_error(void);

/**
 * Creates a model from TOML config text (null for defaults) with
 * initialization seed `seed`.
 *
 * # Safety
 * `config_toml` is null or a valid C string; `out` is a valid pointer.
 */
enum CgrStatus cgr_model_new(const char *config_toml, uint64_t seed, struct CgrModel **out);

/**
 * # Safety
 * `model` is null or came from [`cgr_model_new`] and was not freed before.
 */
void cgr_model_free(struct CgrModel *model);

/**
 * Loads a `CGRW` weight file; every tensor must match the model's shapes.
 *
 * # Safety
 * `model` is a live handle; `path` is a valid C string.
 */
enum CgrStatus cgr_model_load_weights(struct CgrModel *model, const char *path);

/**
 * # Safety
 * `model` is a live handle; `path` is a valid C string.
 */
enum CgrStatus cgr_model_save_weights(const struct CgrModel *model, const char *path);

/**
 * Writes the number of input channels and classes.
 *
 * # Safety
 * All pointers are valid.
 */
enum CgrStatus cgr_model_shape(const struct CgrModel *model,
                               size_t *in_channels,
                               size_t *num_classes);

/**
 * Segments one planar image of `in_channels × height × width` doubles in
 * `[0, 1]`, writing `height × width` class ids to `labels`.
 *
 * # Safety
 * `image` holds `in_channels·height·width` doubles; `labels` holds
 * `height·width` bytes.
 */
enum CgrStatus cgr_model_infer(const struct CgrModel *model,
                               const double *image,
                               size_t height,
                               size_t width,
                               uint8_t *labels);

/**
 * Min-max normalized attention heatmap of `stage` at image resolution.
 *
 * # Safety
 * As [`cgr_model_infer`]; `stage` is a valid C string and `heatmap` holds
 * `height·width` doubles.
 */
enum CgrStatus cgr_model_attention(const struct CgrModel *model,
                                   const double *image,
                                   size_t height,
                                   size_t width,
                                   const char *stage,
                                   double *heatmap);

/**
 * Total multiply-accumulates and learnable parameters at `height × width`.
 *
 * # Safety
 * All pointers are valid.
 */
enum CgrStatus cgr_model_flops(const struct CgrModel *model,
                               size_t height,
                               size_t width,
                               uint64_t *macs,
                               uint64_t *params);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CGRSEG_H */
