#ifndef NORMSHAPE_H
#define NORMSHAPE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum NsStatus {
  NS_STATUS_OK = 0,
  NS_STATUS_NULL_ARGUMENT = 1,
  NS_STATUS_INVALID_ARGUMENT = 2,
  NS_STATUS_IO = 3,
  NS_STATUS_MALFORMED_INPUT = 4,
  NS_STATUS_BAD_INPUT = 5,
  NS_STATUS_RUNTIME = 6,
  NS_STATUS_PANIC = 7,
} NsStatus;

/**
 * Binary mask volume.
 */
typedef struct NsMask NsMask;

/**
 * Trained VAE.
 */
typedef struct NsModel NsModel;

/**
 * Healthy-cohort latent statistics for zero-shot scoring.
 */
typedef struct NsNormative NsNormative;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty if none.
 * Valid until the next failing call on the same thread.
 */
const char *ns_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ns_version(void);

/**
 * Builds a mask from `nx*ny*nz` voxels (x fastest), each 0 or 1.
 */
enum NsStatus ns_mask_new(const size_t *dims,
                          const double *spacing,
                          const uint8_t *voxels,
                          size_t len,
                          struct NsMask **out);

/**
 * Reads a mask file.
 */
enum NsStatus ns_mask_load(const char *path, struct NsMask **out);

/**
 * Writes a mask file.
 */
enum NsStatus ns_mask_save(const struct NsMask *mask, const char *path);

/**
 * Writes the grid extents `[nx, ny, nz]` into `dims`.
 */
enum NsStatus ns_mask_dims(const struct NsMask *mask, size_t *dims);

/**
 * Foreground volume in mm^3.
 */
enum NsStatus ns_mask_volume_mm3(const struct NsMask *mask, double *out);

/**
 * Dice overlap of two masks on the same grid.
 */
enum NsStatus ns_dice(const struct NsMask *a, const struct NsMask *b, double *out);

void ns_mask_free(struct NsMask *mask);

/**
 * Loads a model checkpoint.
 */
enum NsStatus ns_model_load(const char *path, struct NsModel **out);

/**
 * Latent dimension of the model.
 */
enum NsStatus ns_model_latent_dim(const struct NsModel *model, size_t *out);

/**
 * Posterior mean of `mask`, written to `mu[0..len]`; `len` must equal the
 * latent dimension.
 */
enum NsStatus ns_model_encode(const struct NsModel *model,
                              const struct NsMask *mask,
                              double *mu,
                              size_t len);

/**
 * Thresholded reconstruction of `mask` through the model.
 */
enum NsStatus ns_model_reconstruct(const struct NsModel *model,
                                   const struct NsMask *mask,
                                   struct NsMask **out);

void ns_model_free(struct NsModel *model);

/**
 * Fits cohort statistics from `n` row-major latent vectors of length `dim`.
 */
enum NsStatus ns_normative_fit(const double *latents,
                               size_t n,
                               size_t dim,
                               struct NsNormative **out);

/**
 * Zero-shot abnormality score: distance from `z` to the cohort mean.
 */
enum NsStatus ns_zero_shot_score(const struct NsNormative *stats,
                                 const double *z,
                                 size_t dim,
                                 double *out);

void ns_normative_free(struct NsNormative *stats);

/**
 * Area under the ROC curve; labels are 0 (healthy) or 1 (abnormal).
 */
enum NsStatus ns_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NORMSHAPE_H */
