#ifndef FBPC_H
#define FBPC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FbpcStatus {
  FBPC_STATUS_OK = 0,
  FBPC_STATUS_NULL_ARGUMENT = 1,
  FBPC_STATUS_INVALID_ARGUMENT = 2,
  FBPC_STATUS_CONFIG = 3,
  FBPC_STATUS_VALIDATION = 4,
  FBPC_STATUS_DIMENSION = 5,
  FBPC_STATUS_UNSUPPORTED = 6,
  FBPC_STATUS_CAPABILITY = 7,
  FBPC_STATUS_NUMERICAL_RANK = 8,
  FBPC_STATUS_DIVERGENCE = 9,
  FBPC_STATUS_NON_CONVERGENCE = 10,
  FBPC_STATUS_IO = 11,
  FBPC_STATUS_FORMAT = 12,
  FBPC_STATUS_PANIC = 13,
} FbpcStatus;

typedef struct FbpcCoreset FbpcCoreset;

typedef struct FbpcDataset FbpcDataset;

typedef struct FbpcPool FbpcPool;

typedef struct FbpcSamples FbpcSamples;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or `NULL`. Valid until the
 * next `fbpc_*` call on the same thread.
 */
const char *fbpc_last_error_message(void);

/**
 * `kind` is `two_moons`, `gaussian_blobs` or `rings`.
 */
enum FbpcStatus fbpc_dataset_synthetic(const char *kind,
                                       size_t num_classes,
                                       size_t n_train,
                                       size_t n_test,
                                       double noise,
                                       uint64_t seed,
                                       struct FbpcDataset **out);

enum FbpcStatus fbpc_dataset_image_toy(size_t side,
                                       size_t num_classes,
                                       size_t n_per_class,
                                       uint64_t seed,
                                       struct FbpcDataset **out);

enum FbpcStatus fbpc_dataset_load(const char *path, struct FbpcDataset **out);

enum FbpcStatus fbpc_dataset_save(const struct FbpcDataset *ds, const char *path);

/**
 * Writes the class count and the train/test sizes.
 */
enum FbpcStatus fbpc_dataset_shape(const struct FbpcDataset *ds,
                                   size_t *num_classes,
                                   size_t *n_train,
                                   size_t *n_test);

void fbpc_dataset_free(struct FbpcDataset *ds);

/**
 * `architecture` is an architecture JSON object; `experts` an expert
 * config JSON object or `NULL`.
 */
enum FbpcStatus fbpc_pool_generate(const struct FbpcDataset *ds,
                                   const char *architecture,
                                   const char *experts,
                                   uint64_t seed,
                                   struct FbpcPool **out);

enum FbpcStatus fbpc_pool_load(const char *dir, struct FbpcPool **out);

enum FbpcStatus fbpc_pool_save(const struct FbpcPool *pool, const char *dir);

void fbpc_pool_free(struct FbpcPool *pool);

enum FbpcStatus fbpc_coreset_random(const struct FbpcDataset *ds,
                                    size_t ipc,
                                    uint64_t seed,
                                    struct FbpcCoreset **out);

/**
 * Multi-architecture training over `n_pools` pools, one per architecture.
 */
enum FbpcStatus fbpc_coreset_train_fbpc(const struct FbpcDataset *ds,
                                        const struct FbpcPool *const *pools,
                                        size_t n_pools,
                                        const char *config,
                                        size_t ipc,
                                        uint64_t seed,
                                        struct FbpcCoreset **out);

enum FbpcStatus fbpc_coreset_train_bpc_fkl(const struct FbpcDataset *ds,
                                           const struct FbpcPool *pool,
                                           const char *config,
                                           size_t ipc,
                                           uint64_t seed,
                                           struct FbpcCoreset **out);

/**
 * Writes the row count and the flattened per-row input size.
 */
enum FbpcStatus fbpc_coreset_shape(const struct FbpcCoreset *pc, size_t *rows, size_t *input_dim);

/**
 * Copies `rows × input_dim` values; `len` must match exactly.
 */
enum FbpcStatus fbpc_coreset_copy_inputs(const struct FbpcCoreset *pc, double *buf, size_t len);

enum FbpcStatus fbpc_coreset_copy_labels(const struct FbpcCoreset *pc, int64_t *buf, size_t len);

enum FbpcStatus fbpc_coreset_save(const struct FbpcCoreset *pc, const char *path);

enum FbpcStatus fbpc_coreset_load(const char *path, struct FbpcCoreset **out);

void fbpc_coreset_free(struct FbpcCoreset *pc);

/**
 * SGHMC posterior samples on the coreset. `sghmc` is a sampler config JSON
 * object or `NULL`.
 */
enum FbpcStatus fbpc_samples_draw(const char *architecture,
                                  const struct FbpcCoreset *pc,
                                  const char *sghmc,
                                  uint64_t seed,
                                  struct FbpcSamples **out);

enum FbpcStatus fbpc_samples_count(const struct FbpcSamples *s, size_t *count);

/**
 * Bayesian-model-averaged accuracy and NLL on the dataset's test split.
 */
enum FbpcStatus fbpc_samples_evaluate(const struct FbpcSamples *s,
                                      const struct FbpcDataset *ds,
                                      double *accuracy,
                                      double *nll);

void fbpc_samples_free(struct FbpcSamples *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FBPC_H */
