#ifndef SBLWTA_H
#define SBLWTA_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SblwtaStatus {
  SBLWTA_STATUS_OK = 0,
  SBLWTA_STATUS_NULL_ARGUMENT = 1,
  SBLWTA_STATUS_IO = 2,
  SBLWTA_STATUS_FORMAT = 3,
  SBLWTA_STATUS_DIMENSION = 4,
  SBLWTA_STATUS_CONFIG = 5,
  SBLWTA_STATUS_NUMERIC = 6,
  SBLWTA_STATUS_INVALID_ARGUMENT = 7,
  SBLWTA_STATUS_PANIC = 8,
} SblwtaStatus;

// Opaque model handle.
typedef struct SblwtaModel SblwtaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty if none. Valid until the next failure.
const char *sblwta_last_error(void);

// Loads a checkpoint file into `*out`.
//
// # Safety
// `path` must be a nul-terminated string and `out` a valid pointer.
enum SblwtaStatus sblwta_model_load(const char *path, struct SblwtaModel **out);

// Creates a freshly initialized model from a named preset.
//
// # Safety
// `preset` must be a nul-terminated string and `out` a valid pointer.
enum SblwtaStatus sblwta_model_from_preset(const char *preset,
                                           uint64_t seed,
                                           struct SblwtaModel **out);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must come from this library and not be used afterwards.
void sblwta_model_free(struct SblwtaModel *model);

// Writes the model as a checkpoint file.
//
// # Safety
// `model` must be a live handle and `path` a nul-terminated string.
enum SblwtaStatus sblwta_model_save(const struct SblwtaModel *model, const char *path);

// Number of layers, pooling layers included; 0 for a null handle.
//
// # Safety
// `model` must be a live handle or null.
size_t sblwta_model_num_layers(const struct SblwtaModel *model);

// Number of output classes; 0 for a null handle.
//
// # Safety
// `model` must be a live handle or null.
size_t sblwta_model_num_classes(const struct SblwtaModel *model);

// Writes the per-example input shape `[H, W, C]` to `shape[0..3]`.
//
// # Safety
// `shape` must point to three writable `size_t`.
enum SblwtaStatus sblwta_model_input_shape(const struct SblwtaModel *model, size_t *shape);

// Evaluation-mode logits for `count` images laid out as `[count, H, W, C]`.
//
// `logits` receives `count × classes` values; `logits_len` is its capacity.
//
// # Safety
// `images` must hold `count·H·W·C` values and `logits` `logits_len` writable values.
enum SblwtaStatus sblwta_model_logits(const struct SblwtaModel *model,
                                      const double *images,
                                      size_t count,
                                      double *logits,
                                      size_t logits_len);

// Predicted class of each of `count` images.
//
// # Safety
// `images` must hold `count·H·W·C` values and `labels` `count` writable values.
enum SblwtaStatus sblwta_model_predict(const struct SblwtaModel *model,
                                       const double *images,
                                       size_t count,
                                       uint32_t *labels);

// Prunes components with utility probability below `tau`, in place.
//
// `kept` and `total`, if non-null, receive the summed retained and original counts.
//
// # Safety
// `model` must be a live handle; `kept`/`total` null or writable.
enum SblwtaStatus sblwta_model_prune(struct SblwtaModel *model,
                                     double tau,
                                     size_t *kept,
                                     size_t *total);

// Inferred mantissa bits of `layer`; `-1` is written for layers without weights.
//
// # Safety
// `model` must be a live handle and `bits` writable.
enum SblwtaStatus sblwta_model_layer_bits(const struct SblwtaModel *model,
                                          size_t layer,
                                          int32_t *bits);

// Quantizes every layer's weight means to its inferred bit precision, in place.
//
// # Safety
// `model` must be a live handle.
enum SblwtaStatus sblwta_model_quantize(struct SblwtaModel *model);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* SBLWTA_H */
