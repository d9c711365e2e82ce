#ifndef CANF_H
#define CANF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdint.h>
#include <stddef.h>

typedef enum CanfStatus {
  CANF_STATUS_OK = 0,
  CANF_STATUS_NULL_POINTER = 1,
  CANF_STATUS_INVALID_UTF8 = 2,
  CANF_STATUS_SHAPE = 3,
  CANF_STATUS_CONTRACT = 4,
  CANF_STATUS_RANGE = 5,
  CANF_STATUS_CONFIG = 6,
  CANF_STATUS_NUMERIC = 7,
  CANF_STATUS_FORMAT = 8,
  CANF_STATUS_VERSION = 9,
  CANF_STATUS_INTEGRITY = 10,
  CANF_STATUS_CORRECTNESS = 11,
  CANF_STATUS_IO = 12,
  CANF_STATUS_BUFFER_SIZE = 13,
  CANF_STATUS_PANIC = 14,
} CanfStatus;

/**
 * Opaque model handle: weights plus the run config they were built from.
 */
typedef struct CanfModel CanfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into this library from the same thread.
 */
const char *canf_last_error(void);

/**
 * Builds a freshly initialized model from `key = value` config text (null
 * for defaults).
 *
 * # Safety
 * `config_text` must be null or a NUL-terminated string; `out` must be a
 * valid pointer.
 */
enum CanfStatus canf_model_new(const char *config_text, uint64_t seed, struct CanfModel **out);

/**
 * Loads a checkpoint archive.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum CanfStatus canf_model_load(const char *path, struct CanfModel **out);

/**
 * Writes a checkpoint archive.
 *
 * # Safety
 * `model` must come from this library; `path` must be a NUL-terminated
 * string.
 */
enum CanfStatus canf_model_save(const struct CanfModel *model, const char *path);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `model` must be null or a handle from this library not yet freed.
 */
void canf_model_free(struct CanfModel *model);

/**
 * Total trainable parameter count.
 *
 * # Safety
 * `model` must come from this library; `out` must be a valid pointer.
 */
enum CanfStatus canf_model_param_count(const struct CanfModel *model, uint64_t *out);

/**
 * Image geometry and class count: inputs are `[batch, channels, size, size]`
 * and labels run over `0..n_classes` (`n_classes` is the null class).
 *
 * # Safety
 * `model` must come from this library; the out pointers must be valid.
 */
enum CanfStatus canf_model_geometry(const struct CanfModel *model,
                                    uint32_t *channels,
                                    uint32_t *size,
                                    uint32_t *n_classes);

/**
 * Noise prediction for `x [batch, C, H, W]` at per-sample labels and
 * timesteps; writes `batch·C·H·W` floats to `out`.
 *
 * # Safety
 * `x` must hold `batch·C·H·W` floats, `labels` and `timesteps` `batch`
 * values each, and `out` `out_len` writable floats.
 */
enum CanfStatus canf_model_predict(const struct CanfModel *model,
                                   const float *x,
                                   size_t batch,
                                   const uint32_t *labels,
                                   const uint32_t *timesteps,
                                   float *out,
                                   size_t out_len);

/**
 * Guided DDIM samples, one per label; deterministic in `seed`.
 *
 * # Safety
 * `labels` must hold `n` values and `out` `out_len` writable floats.
 */
enum CanfStatus canf_model_sample(const struct CanfModel *model,
                                  const uint32_t *labels,
                                  size_t n,
                                  uint32_t steps,
                                  double guidance,
                                  uint64_t seed,
                                  float *out,
                                  size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CANF_H */
