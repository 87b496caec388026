#ifndef PODLOSS_H
#define PODLOSS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PodStatus {
  POD_STATUS_OK = 0,
  POD_STATUS_NULL_POINTER = 1,
  POD_STATUS_INVALID_ARGUMENT = 2,
  // `k > n + 1` for a simplex.
  POD_STATUS_DIMENSION = 3,
  POD_STATUS_SHAPE = 4,
  POD_STATUS_ZERO_VECTOR = 5,
  POD_STATUS_LABEL = 6,
  // Malformed centroid or checkpoint file.
  POD_STATUS_FORMAT = 7,
  POD_STATUS_IO = 8,
  // Rank loss, divergence or a singular covariance.
  POD_STATUS_NUMERICAL = 9,
  // A Rust panic was caught at the boundary.
  POD_STATUS_PANIC = 10,
} PodStatus;

typedef enum PodScMode {
  POD_SC_MODE_COVARIANCE = 0,
  POD_SC_MODE_PEARSON = 1,
} PodScMode;

// Opaque set of fixed class centroids.
typedef struct PodCentroids PodCentroids;

// Opaque trained network loaded from a checkpoint.
typedef struct PodModel PodModel;

typedef struct PodCentroidReport {
  size_t k;
  size_t n;
  double max_norm_deviation;
  double max_geometry_deviation;
  bool passed;
} PodCentroidReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *pod_version(void);

// Copies the calling thread's last error message into `buf` (truncated and
// always NUL-terminated when `len > 0`). Returns the full message length
// including the NUL, or 0 when the last call succeeded.
//
// # Safety
// `buf` must be NULL or point to `len` writable bytes.
size_t pod_last_error_message(char *buf, size_t len);

// Regular simplex of `k` unit vectors in `n` dimensions, randomly rotated by `seed`.
//
// # Safety
// `out` must be a valid pointer; on success it receives a new handle.
enum PodStatus pod_centroids_simplex(size_t k, size_t n, uint64_t seed, struct PodCentroids **out);

// `k` evenly spaced points on the unit circle starting at angle `phase`.
//
// # Safety
// `out` must be a valid pointer; on success it receives a new handle.
enum PodStatus pod_centroids_circle(size_t k, double phase, struct PodCentroids **out);

// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum PodStatus pod_centroids_load(const char *path, struct PodCentroids **out);

// # Safety
// `cs` must be a live handle and `path` a NUL-terminated string.
enum PodStatus pod_centroids_save(const struct PodCentroids *cs, const char *path);

// Number of classes, or 0 for NULL.
//
// # Safety
// `cs` must be NULL or a live handle.
size_t pod_centroids_k(const struct PodCentroids *cs);

// Latent dimension, or 0 for NULL.
//
// # Safety
// `cs` must be NULL or a live handle.
size_t pod_centroids_n(const struct PodCentroids *cs);

// Copies the `k × n` centroid matrix into `out`, which must hold exactly `k * n` values.
//
// # Safety
// `cs` must be a live handle and `out` must point to `len` writable doubles.
enum PodStatus pod_centroids_copy_points(const struct PodCentroids *cs, double *out, size_t len);

// # Safety
// `cs` must be a live handle and `report` a valid pointer.
enum PodStatus pod_centroids_verify(const struct PodCentroids *cs,
                                    struct PodCentroidReport *report);

// # Safety
// `cs` must be NULL or a handle not yet freed.
void pod_centroids_free(struct PodCentroids *cs);

// Nearest centroid by cosine. `degenerate` (optional) is set when `x` is zero.
//
// # Safety
// `x` must point to `n` doubles; `class_out` must be valid; `degenerate` may be NULL.
enum PodStatus pod_classify_cosine(const struct PodCentroids *cs,
                                   const double *x,
                                   size_t n,
                                   size_t *class_out,
                                   bool *degenerate);

// Norm-adaptive cosine loss. `grad` may be NULL; otherwise it receives
// `rows × n` values.
//
// # Safety
// `features` must hold `rows * n` doubles, `labels` `rows` entries, `value`
// must be valid, and `grad` NULL or `grad_len` writable doubles.
enum PodStatus pod_nac_loss(const struct PodCentroids *cs,
                            const double *features,
                            size_t rows,
                            size_t n,
                            const size_t *labels,
                            double delta,
                            double *value,
                            double *grad,
                            size_t grad_len);

// Self-correlation loss of the residuals to each sample's centroid.
//
// # Safety
// As for [`pod_nac_loss`].
enum PodStatus pod_sc_loss(const struct PodCentroids *cs,
                           const double *features,
                           size_t rows,
                           size_t n,
                           const size_t *labels,
                           enum PodScMode mode,
                           double *value,
                           double *grad,
                           size_t grad_len);

// NaC loss plus `lambda` times the SC loss.
//
// # Safety
// As for [`pod_nac_loss`].
enum PodStatus pod_pod_loss(const struct PodCentroids *cs,
                            const double *features,
                            size_t rows,
                            size_t n,
                            const size_t *labels,
                            double delta,
                            double lambda,
                            enum PodScMode mode,
                            double *value,
                            double *grad,
                            size_t grad_len);

// Mean softmax cross-entropy over `rows` logit rows of width `classes`.
//
// # Safety
// `logits` must hold `rows * classes` doubles, `labels` `rows` entries,
// `value` must be valid, and `grad` NULL or `grad_len` writable doubles.
enum PodStatus pod_softmax_ce_loss(const double *logits,
                                   size_t rows,
                                   size_t classes,
                                   const size_t *labels,
                                   double *value,
                                   double *grad,
                                   size_t grad_len);

// Loads a network checkpoint written by `podloss train`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum PodStatus pod_model_load(const char *path, struct PodModel **out);

// Flattened input length, or 0 for NULL.
//
// # Safety
// `m` must be NULL or a live handle.
size_t pod_model_input_dim(const struct PodModel *m);

// # Safety
// `m` must be NULL or a live handle.
size_t pod_model_latent_dim(const struct PodModel *m);

// Width of the final layer: the latent dimension, or the class count for
// models with a softmax head.
//
// # Safety
// `m` must be NULL or a live handle.
size_t pod_model_output_dim(const struct PodModel *m);

// Runs `rows` standardised inputs through the network. Either output buffer
// may be NULL; otherwise its length must match exactly.
//
// # Safety
// `input` must hold `rows * input_dim` doubles and each non-NULL output
// buffer its stated number of writable doubles.
enum PodStatus pod_model_forward(const struct PodModel *m,
                                 const double *input,
                                 size_t rows,
                                 size_t input_dim,
                                 double *output,
                                 size_t output_len,
                                 double *latent,
                                 size_t latent_len);

// # Safety
// `m` must be NULL or a handle not yet freed.
void pod_model_free(struct PodModel *m);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PODLOSS_H */
