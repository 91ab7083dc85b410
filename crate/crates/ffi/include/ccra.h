#ifndef CCRA_H
#define CCRA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CcraStatus {
  CCRA_STATUS_OK = 0,
  CCRA_STATUS_NULL_POINTER = 1,
  CCRA_STATUS_INVALID_CONFIG = 2,
  CCRA_STATUS_SHAPE_MISMATCH = 3,
  CCRA_STATUS_INVALID_ARGUMENT = 4,
  CCRA_STATUS_NON_FINITE = 5,
  CCRA_STATUS_BUFFER_TOO_SMALL = 6,
  CCRA_STATUS_PANIC = 7,
} CcraStatus;

// Trace fields readable through [`ccra_trace_len`] and [`ccra_trace_copy`].
typedef enum CcraField {
  // Token importance, `T`.
  CCRA_FIELD_ALPHA = 0,
  // Layer-patch gates, `L×N`.
  CCRA_FIELD_LAYER_PATCH_MAP = 1,
  // Raw layer scores, `L`.
  CCRA_FIELD_LAYER_WEIGHTS_RAW = 2,
  // Smoothed layer distribution, `L`.
  CCRA_FIELD_LAYER_WEIGHTS_SMOOTHED = 3,
  // Patch gates, `N`.
  CCRA_FIELD_PATCH_WEIGHTS = 4,
  // Gated layer-patch features, `L×N×d`.
  CCRA_FIELD_LAYER_PATCH_FEATURES = 5,
  // `N×d`.
  CCRA_FIELD_SEMANTIC_FEATURES = 6,
  // `N×d`.
  CCRA_FIELD_REGIONAL_FEATURES = 7,
  // `N×2d`.
  CCRA_FIELD_FUSED = 8,
  // `N×d_llm`.
  CCRA_FIELD_PROJECTED = 9,
  // `V`.
  CCRA_FIELD_LOGITS = 10,
} CcraField;

typedef struct CcraModel CcraModel;

typedef struct CcraTrace CcraTrace;

// Model dimensions. `sigma <= 0` selects the default `k/3`; `variant` is
// 0 (pai), 1 (decoupled) or 2 (shuffled).
typedef struct CcraConfig {
  size_t layers;
  size_t patches;
  size_t d;
  size_t tokens;
  size_t d_hidden;
  size_t d_llm;
  size_t vocab;
  size_t k;
  double sigma;
  uint64_t seed;
  uint32_t variant;
} CcraConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread; empty after a success.
// Valid until the next call on the same thread.
const char *ccra_last_error(void);

// Fills `out` with the default dimensions.
//
// # Safety
// `out` must be null or valid for writes.
enum CcraStatus ccra_config_default(struct CcraConfig *out);

// Creates a model with seeded initial parameters.
//
// # Safety
// `cfg` must be null or point to a valid config; `out` must be null or valid
// for writes. On success `*out` owns a model to release with
// [`ccra_model_free`].
enum CcraStatus ccra_model_new(const struct CcraConfig *cfg, struct CcraModel **out);

// # Safety
// `model` must be null or a handle from [`ccra_model_new`] not yet freed.
void ccra_model_free(struct CcraModel *model);

// Number of trainable parameters.
//
// # Safety
// `model` must be a live handle; `out` must be null or valid for writes.
enum CcraStatus ccra_model_param_count(const struct CcraModel *model, size_t *out);

// Forward pass on caller data: `text` is `T×d` and `visual` is `L×N×d`,
// both row-major.
//
// # Safety
// `model` must be a live handle; `text` and `visual` must be readable for
// their lengths; `out` must be null or valid for writes. On success `*out`
// owns a trace to release with [`ccra_trace_free`].
enum CcraStatus ccra_model_forward(const struct CcraModel *model,
                                   const double *text,
                                   size_t text_len,
                                   const double *visual,
                                   size_t visual_len,
                                   struct CcraTrace **out);

// Forward pass on inputs synthesized from `seed`.
//
// # Safety
// As [`ccra_model_forward`].
enum CcraStatus ccra_model_forward_synthetic(const struct CcraModel *model,
                                             uint64_t seed,
                                             struct CcraTrace **out);

// One gradient-descent step on a single example. Writes the loss before
// the update to `out_loss` when it is not null. Parameters are unchanged on
// failure.
//
// # Safety
// `model` must be a live handle not used concurrently; buffers as in
// [`ccra_model_forward`].
enum CcraStatus ccra_model_train_step(struct CcraModel *model,
                                      const double *text,
                                      size_t text_len,
                                      const double *visual,
                                      size_t visual_len,
                                      size_t target,
                                      double lr,
                                      double *out_loss);

// Number of values in the trace field `field_id` (a `CcraField` value).
//
// # Safety
// `trace` must be a live handle; `out` must be null or valid for writes.
enum CcraStatus ccra_trace_len(const struct CcraTrace *trace, uint32_t field_id, size_t *out);

// Copies the trace field `field_id` into `buf`, which must hold at least
// [`ccra_trace_len`] values.
//
// # Safety
// `trace` must be a live handle; `buf` must be writable for `buf_len`
// values.
enum CcraStatus ccra_trace_copy(const struct CcraTrace *trace,
                                uint32_t field_id,
                                double *buf,
                                size_t buf_len);

// # Safety
// `trace` must be null or a handle from a forward call not yet freed.
void ccra_trace_free(struct CcraTrace *trace);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CCRA_H */
