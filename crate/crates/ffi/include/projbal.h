#ifndef PROJBAL_H
#define PROJBAL_H

#include <stddef.h>
#include <stdint.h>
#include <stdbool.h>

// Result codes returned by every fallible call.
typedef enum ProjbalStatus {
  PROJBAL_STATUS_OK = 0,
  PROJBAL_STATUS_NULL_POINTER = 1,
  PROJBAL_STATUS_INVALID_ARGUMENT = 2,
  PROJBAL_STATUS_NOT_HERMITIAN = 3,
  PROJBAL_STATUS_NOT_POSITIVE_DEFINITE = 4,
  PROJBAL_STATUS_DIMENSION_MISMATCH = 5,
  PROJBAL_STATUS_DEGREE_OUT_OF_RANGE = 6,
  PROJBAL_STATUS_QUADRATURE_UNDER_RESOLVED = 7,
  PROJBAL_STATUS_NOT_CONVERGED = 8,
  PROJBAL_STATUS_NUMERICAL = 9,
  PROJBAL_STATUS_PANIC = 10,
} ProjbalStatus;

// Result of a balancing run.
typedef struct ProjbalBalance ProjbalBalance;

// Hermitian positive definite matrix.
typedef struct ProjbalMetric ProjbalMetric;

// Quadrature rule on the Fubini-Study projective space.
typedef struct ProjbalQuadrature ProjbalQuadrature;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *projbal_version(void);

// Message of the last failed call on this thread, or an empty string.
// The pointer stays valid until the next call into the library on the same
// thread.
const char *projbal_last_error_message(void);

// Builds a metric from `2 dim dim` interleaved doubles.
//
// # Safety
// `data` must point to `2 * dim * dim` readable doubles and `out` to a
// writable handle slot.
enum ProjbalStatus projbal_metric_new(const double *data, size_t dim, struct ProjbalMetric **out);

// # Safety
// `m` must be null or a handle from this library not yet freed.
void projbal_metric_free(struct ProjbalMetric *m);

// Dimension of the metric, 0 for a null handle.
//
// # Safety
// `m` must be null or a live handle.
size_t projbal_metric_dim(const struct ProjbalMetric *m);

// Copies the matrix out as interleaved doubles.
//
// # Safety
// `m` must be a live handle and `out` must hold `len` writable doubles.
enum ProjbalStatus projbal_metric_copy(const struct ProjbalMetric *m, double *out, size_t len);

// Induced metric on the `d`-th symmetric power, in the monomial basis.
//
// # Safety
// `h` must be a live handle and `out` a writable handle slot.
enum ProjbalStatus projbal_sym_power_metric(const struct ProjbalMetric *h,
                                            size_t d,
                                            struct ProjbalMetric **out);

// Distance between two metrics of equal dimension.
//
// # Safety
// `h` and `h0` must be live handles and `out` a writable double.
enum ProjbalStatus projbal_metric_distance(const struct ProjbalMetric *h,
                                           const struct ProjbalMetric *h0,
                                           double *out);

// Deterministic product rule on P^{r-1} at the given level.
//
// # Safety
// `out` must be a writable handle slot.
enum ProjbalStatus projbal_fs_quadrature_new(size_t r,
                                             size_t level,
                                             struct ProjbalQuadrature **out);

// Seeded Monte Carlo rule on P^{r-1}.
//
// # Safety
// `out` must be a writable handle slot.
enum ProjbalStatus projbal_fs_quadrature_monte_carlo_new(size_t r,
                                                         size_t samples,
                                                         uint64_t seed,
                                                         struct ProjbalQuadrature **out);

// # Safety
// `q` must be null or a handle from this library not yet freed.
void projbal_fs_quadrature_free(struct ProjbalQuadrature *q);

// Number of nodes, 0 for a null handle.
//
// # Safety
// `q` must be null or a live handle.
size_t projbal_fs_quadrature_len(const struct ProjbalQuadrature *q);

// Closed form of the fiber constant `C_{r,d}`; NaN when `r` or `d` is 0.
double projbal_c_closed_form(size_t r, size_t d);

// Fiber constant computed with `rule`, rejected when the rule is
// under-resolved for degree `d`.
//
// # Safety
// `rule` must be a live handle and `out` a writable double.
enum ProjbalStatus projbal_c_constant(size_t r,
                                      size_t d,
                                      const struct ProjbalQuadrature *rule,
                                      double *out);

// Balances the split bundle `O(a_1) + ... + O(a_rank)` over P^1 at tensor
// power `k`, with symmetric power `d` of the fiber.
//
// Returns `NOT_CONVERGED` when the iteration budget runs out; the handle is
// still written so the report can be inspected, and must be freed.
//
// # Safety
// `degrees` must point to `rank` readable integers and `out` to a writable
// handle slot.
enum ProjbalStatus projbal_balance_p1(const int64_t *degrees,
                                      size_t rank,
                                      size_t k,
                                      size_t d,
                                      double tol,
                                      size_t max_iter,
                                      struct ProjbalBalance **out);

// # Safety
// `b` must be null or a handle from this library not yet freed.
void projbal_balance_free(struct ProjbalBalance *b);

// Number of sections, i.e. the Gram dimension. 0 for a null handle.
//
// # Safety
// `b` must be null or a live handle.
size_t projbal_balance_dim(const struct ProjbalBalance *b);

// # Safety
// `b` must be null or a live handle.
bool projbal_balance_converged(const struct ProjbalBalance *b);

// # Safety
// `b` must be null or a live handle.
size_t projbal_balance_iterations(const struct ProjbalBalance *b);

// Final residual, NaN for a null handle.
//
// # Safety
// `b` must be null or a live handle.
double projbal_balance_residual(const struct ProjbalBalance *b);

// Copies the balanced Gram matrix out as interleaved doubles.
//
// # Safety
// `b` must be a live handle and `out` must hold `len` writable doubles.
enum ProjbalStatus projbal_balance_copy_gram(const struct ProjbalBalance *b,
                                             double *out,
                                             size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROJBAL_H */
