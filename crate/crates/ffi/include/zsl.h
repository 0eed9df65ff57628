#ifndef ZSL_H
#define ZSL_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ZslStatus {
  ZSL_STATUS_OK = 0,
  ZSL_STATUS_NULL_POINTER = 1,
  ZSL_STATUS_INVALID_INPUT = 2,
  ZSL_STATUS_DIMENSION_MISMATCH = 3,
  ZSL_STATUS_ILL_CONDITIONED = 4,
  ZSL_STATUS_NO_CONVERGENCE = 5,
  ZSL_STATUS_NON_FINITE = 6,
  ZSL_STATUS_PANIC = 7,
} ZslStatus;

typedef enum ZslPiMode {
  ZSL_PI_MODE_LITERAL = 0,
  ZSL_PI_MODE_STATIONARY = 1,
} ZslPiMode;

typedef enum ZslArgmax {
  ZSL_ARGMAX_UNSEEN = 0,
  ZSL_ARGMAX_ALL = 1,
} ZslArgmax;

/**
 * One-vs-rest logistic regression model.
 */
typedef struct ZslLogReg ZslLogReg;

/**
 * Propagation operator over a fixed class graph.
 */
typedef struct ZslOperator ZslOperator;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *zsl_version(void);

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next call into this library on the same thread.
 */
const char *zsl_last_error_message(void);

/**
 * Builds the `n x n` class-graph weight matrix from `n x dim` semantic
 * vectors (seen classes first) into `out_weights`.
 *
 * # Safety
 * `semantic` must hold `n * dim` doubles and `out_weights` room for `n * n`.
 */
enum ZslStatus zsl_graph_build(const double *semantic,
                               size_t n,
                               size_t dim,
                               size_t p,
                               size_t k1,
                               size_t k2,
                               double *out_weights);

/**
 * Builds the propagation operator for `n x dim` semantic vectors.
 *
 * # Safety
 * `semantic` must hold `n * dim` doubles; `out` must be a valid pointer.
 */
enum ZslStatus zsl_operator_new(const double *semantic,
                                size_t n,
                                size_t dim,
                                size_t p,
                                size_t k1,
                                size_t k2,
                                double eta,
                                double alpha,
                                enum ZslPiMode pi_mode,
                                struct ZslOperator **out);

/**
 * # Safety
 * `op` must come from [`zsl_operator_new`] and not be freed twice.
 */
void zsl_operator_free(struct ZslOperator *op);

/**
 * Number of classes of the operator, 0 for NULL.
 *
 * # Safety
 * `op` must be NULL or a live handle.
 */
size_t zsl_operator_classes(const struct ZslOperator *op);

/**
 * Spectral radius of the symmetric operator, NaN for NULL.
 *
 * # Safety
 * `op` must be NULL or a live handle.
 */
double zsl_operator_spectral_radius(const struct ZslOperator *op);

/**
 * Direct solve of the propagated scores for `rows x n` seeds.
 *
 * # Safety
 * `seeds` and `out` must hold `rows * n` doubles.
 */
enum ZslStatus zsl_operator_propagate(const struct ZslOperator *op,
                                      const double *seeds,
                                      size_t rows,
                                      double *out);

/**
 * Fixed-point iteration from the seeds. Writes the last iterate and the
 * iteration count; returns `NO_CONVERGENCE` if `tol` was not reached.
 *
 * # Safety
 * `seeds` and `out` must hold `rows * n` doubles; `out_iterations` may be
 * NULL.
 */
enum ZslStatus zsl_operator_propagate_iterative(const struct ZslOperator *op,
                                                const double *seeds,
                                                size_t rows,
                                                double tol,
                                                size_t max_iter,
                                                double *out,
                                                size_t *out_iterations);

/**
 * Arg-max class index per row of a `rows x n` score matrix; ties go to the
 * lower index.
 *
 * # Safety
 * `scores` must hold `rows * n` doubles and `out` room for `rows` indices.
 */
enum ZslStatus zsl_predict_labels(const double *scores,
                                  size_t rows,
                                  size_t n,
                                  size_t p,
                                  enum ZslArgmax argmax,
                                  size_t *out);

/**
 * Trains one-vs-rest logistic regression on `rows x dim` features with
 * labels in `0..classes`.
 *
 * # Safety
 * `x` must hold `rows * dim` doubles, `labels` `rows` entries; `out` must be
 * a valid pointer.
 */
enum ZslStatus zsl_logreg_train(const double *x,
                                const size_t *labels,
                                size_t rows,
                                size_t dim,
                                size_t classes,
                                double c,
                                struct ZslLogReg **out);

/**
 * Normalized class probabilities, `rows x classes`.
 *
 * # Safety
 * `x` must hold `rows * dim` doubles and `out` room for `rows * classes`.
 */
enum ZslStatus zsl_logreg_predict_proba(const struct ZslLogReg *model,
                                        const double *x,
                                        size_t rows,
                                        double *out);

/**
 * # Safety
 * `model` must come from [`zsl_logreg_train`] and not be freed twice.
 */
void zsl_logreg_free(struct ZslLogReg *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ZSL_H */
