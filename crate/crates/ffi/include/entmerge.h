#ifndef ENTMERGE_H
#define ENTMERGE_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

/**
 * Result code of every call.
 */
typedef enum EmStatus {
  EM_STATUS_OK = 0,
  EM_STATUS_NULL_POINTER = 1,
  EM_STATUS_INVALID_ARGUMENT = 2,
  EM_STATUS_SHAPE = 3,
  EM_STATUS_DATA = 4,
  EM_STATUS_CONFIG = 5,
  EM_STATUS_TRAINING = 6,
  EM_STATUS_FORMAT = 7,
  EM_STATUS_IO = 8,
  EM_STATUS_PANIC = 9,
} EmStatus;

/**
 * Online merging state bound to one pool.
 */
typedef struct EmEngine EmEngine;

/**
 * Frozen expert pool.
 */
typedef struct EmPool EmPool;

/**
 * Engine hyperparameters. Obtain defaults from [`em_engine_config_default`].
 */
typedef struct EmEngineConfig {
  double epsilon;
  double tau_ent;
  double tau_head;
  double ema_rate;
  size_t views;
  uint64_t seed;
} EmEngineConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, empty after a success.
 * Valid until the next call on the same thread.
 */
const char *em_last_error(void);

/**
 * Loads a pool checkpoint written by `entmerge train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum EmStatus em_pool_load(const char *path, struct EmPool **out);

/**
 * Releases a pool. Engines created from it stay valid.
 *
 * # Safety
 * `pool` must come from [`em_pool_load`] and not be freed twice.
 */
void em_pool_free(struct EmPool *pool);

/**
 * Writes the number of experts, the input width and the class count.
 * Any of the output pointers may be null.
 *
 * # Safety
 * `pool` must be a live handle.
 */
enum EmStatus em_pool_info(const struct EmPool *pool,
                           size_t *num_experts,
                           size_t *input_dim,
                           size_t *num_classes);

/**
 * Default engine hyperparameters.
 */
struct EmEngineConfig em_engine_config_default(void);

/**
 * Starts a stream over `pool`. A null `config` means the defaults.
 *
 * # Safety
 * `pool` must be a live handle, `config` null or valid, `out` writable.
 */
enum EmStatus em_engine_new(const struct EmPool *pool,
                            const struct EmEngineConfig *config,
                            struct EmEngine **out);

/**
 * Releases an engine.
 *
 * # Safety
 * `engine` must come from [`em_engine_new`] and not be freed twice.
 */
void em_engine_free(struct EmEngine *engine);

/**
 * Merges the pool for one row-major `rows x cols` batch and predicts it.
 *
 * Outputs are optional: `predicted` holds `rows` class indices,
 * `probabilities` holds `rows x classes` values, `alpha_encoder` and
 * `alpha_head` hold one coefficient per expert.
 *
 * # Safety
 * `features` must point to `rows * cols` floats; every non-null output
 * must have room for the sizes above.
 */
enum EmStatus em_engine_step(struct EmEngine *engine,
                             const float *features,
                             size_t rows,
                             size_t cols,
                             size_t *predicted,
                             float *probabilities,
                             double *alpha_encoder,
                             double *alpha_head);

/**
 * Number of batches processed so far.
 *
 * # Safety
 * `engine` must be a live handle and `out` writable.
 */
enum EmStatus em_engine_steps(const struct EmEngine *engine, size_t *out);

/**
 * Normalized inverse-entropy weights for `k` scores.
 *
 * # Safety
 * `scores` and `out` must each hold `k` doubles.
 */
enum EmStatus em_inverse_entropy_coefficients(const double *scores,
                                              size_t k,
                                              double epsilon,
                                              double *out);

/**
 * Head weights from entropy gaps to the selected expert `k_star`.
 *
 * # Safety
 * `scores` and `out` must each hold `k` doubles.
 */
enum EmStatus em_head_coefficients(const double *scores,
                                   size_t k,
                                   size_t k_star,
                                   double tau_head,
                                   double *out);

/**
 * Percent of norm lost by averaging two equal-norm vectors `angle_deg` apart.
 *
 * # Safety
 * `out` must be writable.
 */
enum EmStatus em_signal_loss(double angle_deg, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ENTMERGE_H */
