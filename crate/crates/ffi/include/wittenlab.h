#ifndef WITTENLAB_H
#define WITTENLAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum WlStatus {
  WL_STATUS_OK = 0,
  WL_STATUS_NULL_POINTER = 1,
  WL_STATUS_INVALID_ARGUMENT = 2,
  WL_STATUS_SOLVER = 3,
  WL_STATUS_DEFINITENESS = 4,
  WL_STATUS_RESOURCE = 5,
  WL_STATUS_INTERNAL = 6,
} WlStatus;

/**
 * A model on a grid with its precomputed operators.
 */
typedef struct WlSystem WlSystem;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Independent standard Gaussian spins on a chain of `n_sites`, on a grid
 * with `points_per_site` nodes per axis over `[-half_width, half_width]`.
 *
 * # Safety
 * `out` must be valid for writing one pointer.
 */
enum WlStatus wl_system_new_gaussian(size_t n_sites,
                                     double half_width,
                                     size_t points_per_site,
                                     struct WlSystem **out);

/**
 * Kac chain of `n_sites` with coupling `nu`.
 *
 * # Safety
 * `out` must be valid for writing one pointer.
 */
enum WlStatus wl_system_new_kac_chain(size_t n_sites,
                                      double nu,
                                      double half_width,
                                      size_t points_per_site,
                                      struct WlSystem **out);

/**
 * # Safety
 * `sys` must be null or a handle from `wl_system_new_*` not yet freed.
 */
void wl_system_free(struct WlSystem *sys);

/**
 * # Safety
 * `sys` must be a live handle and `out` valid for writing.
 */
enum WlStatus wl_system_num_sites(const struct WlSystem *sys, size_t *out);

/**
 * `cov(x_i, x_j)` through the one-form solve at relative tolerance `tol`.
 * `out_error` may be null.
 *
 * # Safety
 * `sys` must be a live handle; `out_value` valid for writing.
 */
enum WlStatus wl_covariance_coordinates(const struct WlSystem *sys,
                                        size_t i,
                                        size_t j,
                                        double tol,
                                        double *out_value,
                                        double *out_error);

/**
 * `<x_i>` by quadrature.
 *
 * # Safety
 * `sys` must be a live handle; `out` valid for writing.
 */
enum WlStatus wl_gibbs_mean_coordinate(const struct WlSystem *sys, size_t i, double *out);

/**
 * `ln` of the box-truncated partition function.
 *
 * # Safety
 * `sys` must be a live handle; `out` valid for writing.
 */
enum WlStatus wl_log_partition(const struct WlSystem *sys, double *out);

/**
 * `n`-th derivative in `t` of the log-partition function of `Phi - t g`
 * with `g = sum_k coefficients[k] x_k` over all `len = n_sites` sites.
 *
 * # Safety
 * `sys` must be a live handle, `coefficients` readable for `len` values
 * and `out` valid for writing.
 */
enum WlStatus wl_theta_derivative_linear(const struct WlSystem *sys,
                                         const double *coefficients,
                                         size_t len,
                                         size_t n,
                                         double t,
                                         double tol,
                                         double *out);

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *wl_last_error_message(void);

const char *wl_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WITTENLAB_H */
