#ifndef AVDREC_H
#define AVDREC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AvdrecStatus {
  AVDREC_STATUS_OK = 0,
  AVDREC_STATUS_NULL_ARGUMENT = 1,
  AVDREC_STATUS_CONFIG = 2,
  AVDREC_STATUS_IO = 3,
  AVDREC_STATUS_PARSE = 4,
  AVDREC_STATUS_DATA = 5,
  AVDREC_STATUS_NUMERIC = 6,
  AVDREC_STATUS_CAPABILITY = 7,
  AVDREC_STATUS_HASH_MISMATCH = 8,
  AVDREC_STATUS_PANIC = 9,
} AvdrecStatus;

/**
 * Opaque content-factor artifact.
 */
typedef struct AvdrecFactors AvdrecFactors;

/**
 * Opaque trained model.
 */
typedef struct AvdrecModel AvdrecModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length in bytes, excluding
 * the terminator.
 *
 * # Safety
 * `buf` must be null or point to at least `len` writable bytes.
 */
size_t avdrec_last_error(char *buf, size_t len);

/**
 * Loads a model file written by `avdrec train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AvdrecStatus avdrec_model_load(const char *path, struct AvdrecModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`avdrec_model_load`] and not be used afterwards.
 */
void avdrec_model_free(struct AvdrecModel *model);

/**
 * Model dimensions; `content_dim` is 0 for a content-free model. Any
 * output pointer may be null.
 *
 * # Safety
 * `model` must be a live handle; non-null outputs must be writable.
 */
enum AvdrecStatus avdrec_model_dims(const struct AvdrecModel *model,
                                    size_t *n_users,
                                    size_t *n_items,
                                    size_t *rank,
                                    size_t *content_dim);

/**
 * Score of a training-set song for `user`.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum AvdrecStatus avdrec_predict_in_matrix(const struct AvdrecModel *model,
                                           size_t user,
                                           size_t item,
                                           double *out);

/**
 * Cold-start score of a song with content factors `z[0..len]`.
 *
 * # Safety
 * `model` must be a live handle, `z` must hold `len` doubles and `out` be
 * writable.
 */
enum AvdrecStatus avdrec_predict_out_of_matrix(const struct AvdrecModel *model,
                                               size_t user,
                                               const double *z,
                                               size_t len,
                                               double *out);

/**
 * Loads a factor artifact written by `avdrec features`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AvdrecStatus avdrec_factors_load(const char *path, struct AvdrecFactors **out);

/**
 * Releases a factor artifact. Null is ignored.
 *
 * # Safety
 * `factors` must come from [`avdrec_factors_load`] and not be used
 * afterwards.
 */
void avdrec_factors_free(struct AvdrecFactors *factors);

/**
 * Number of raw features expected and factors produced.
 *
 * # Safety
 * `factors` must be a live handle; non-null outputs must be writable.
 */
enum AvdrecStatus avdrec_factors_dims(const struct AvdrecFactors *factors,
                                      size_t *n_features,
                                      size_t *n_factors);

/**
 * Content factors of one song from its raw (unstandardized) features.
 *
 * # Safety
 * `raw` must hold `n_features` doubles and `out` room for `n_factors`.
 */
enum AvdrecStatus avdrec_factors_score(const struct AvdrecFactors *factors,
                                       const double *raw,
                                       size_t n_features,
                                       double *out,
                                       size_t n_factors);

/**
 * NDCG of a ranked list of relevance flags (nonzero = relevant). Writes NaN
 * when the list holds no relevant item.
 *
 * # Safety
 * `relevance` must hold `len` bytes (or be null with `len == 0`) and `out`
 * be writable.
 */
enum AvdrecStatus avdrec_ndcg(const uint8_t *relevance, size_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AVDREC_H */
