#ifndef MIXENKF_H
#define MIXENKF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum MekStatus {
  MEK_STATUS_OK = 0,
  MEK_STATUS_NULL_POINTER = 1,
  MEK_STATUS_INVALID_ARGUMENT = 2,
  MEK_STATUS_BUFFER_TOO_SMALL = 3,
  MEK_STATUS_FILTER_FAILED = 4,
  MEK_STATUS_PANIC = 5,
} MekStatus;

/**
 * Opaque filter handle; owns a copy of its model.
 */
typedef struct MekFilter MekFilter;

/**
 * Opaque model handle.
 */
typedef struct MekModel MekModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len` bytes) and returns the full message length.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t mek_last_error(char *buf, size_t len);

/**
 * Builds a benchmark (`lotka_volterra`, `lorenz63`, `lorenz96`) with
 * `linear` or `arctan` observations.
 *
 * # Safety
 * `name` and `obs` must be NUL-terminated strings; `out` must be writable.
 */
enum MekStatus mek_model_new_benchmark(const char *name, const char *obs, struct MekModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must be null or a live handle from [`mek_model_new_benchmark`].
 */
void mek_model_free(struct MekModel *model);

/**
 * State and observation dimensions.
 *
 * # Safety
 * `model` must be a live handle; `d` and `m` must be writable.
 */
enum MekStatus mek_model_dims(const struct MekModel *model, size_t *d, size_t *m);

/**
 * Simulates `horizon` steps. `states` receives `(horizon + 1)·d` values
 * and `observations` `horizon·m` values, row-major by time.
 *
 * # Safety
 * `model` must be a live handle; the buffers must hold the stated lengths.
 */
enum MekStatus mek_model_simulate(const struct MekModel *model,
                                  size_t horizon,
                                  uint64_t seed,
                                  double *states,
                                  size_t states_len,
                                  double *observations,
                                  size_t observations_len);

/**
 * Creates a filter of `n` particles running `scheme` (for example `EnKF`,
 * `MMstr_c`, `QMC-MM_c`) on a copy of `model`.
 *
 * # Safety
 * `model` must be a live handle, `scheme` a NUL-terminated string and
 * `out` writable.
 */
enum MekStatus mek_filter_new(const struct MekModel *model,
                              const char *scheme,
                              size_t n,
                              uint64_t seed,
                              struct MekFilter **out);

/**
 * Releases a filter. Null is ignored.
 *
 * # Safety
 * `filter` must be null or a live handle from [`mek_filter_new`].
 */
void mek_filter_free(struct MekFilter *filter);

/**
 * Particle count and state dimension.
 *
 * # Safety
 * `filter` must be a live handle; `n` and `d` must be writable.
 */
enum MekStatus mek_filter_size(const struct MekFilter *filter, size_t *n, size_t *d);

/**
 * Assimilates one observation of length `m`.
 *
 * # Safety
 * `filter` must be a live handle and `y` must point to `y_len` values.
 */
enum MekStatus mek_filter_step(struct MekFilter *filter, const double *y, size_t y_len);

/**
 * Copies the current weighted ensemble, `n·d` values row-major by particle.
 *
 * # Safety
 * `filter` must be a live handle and `out` must hold `len` values.
 */
enum MekStatus mek_filter_particles(const struct MekFilter *filter, double *out, size_t len);

/**
 * Copies the normalized weights of the current ensemble.
 *
 * # Safety
 * `filter` must be a live handle and `out` must hold `len` values.
 */
enum MekStatus mek_filter_weights(const struct MekFilter *filter, double *out, size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MIXENKF_H */
