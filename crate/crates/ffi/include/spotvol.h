#ifndef SPOTVOL_H
#define SPOTVOL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum {
  SPOTVOL_KERNEL_EPANECHNIKOV = 0,
  SPOTVOL_KERNEL_UNIFORM = 1,
  SPOTVOL_KERNEL_GAUSSIAN = 2,
} SpotvolKernel;

typedef enum {
  SPOTVOL_RULE_NONE = 0,
  SPOTVOL_RULE_SCAD = 1,
  SPOTVOL_RULE_ADAPTIVE_LASSO = 2,
  SPOTVOL_RULE_SOFT = 3,
  SPOTVOL_RULE_HARD = 4,
} SpotvolRule;

typedef enum {
  SPOTVOL_STATUS_OK = 0,
  SPOTVOL_STATUS_NULL_POINTER = 1,
  SPOTVOL_STATUS_INVALID_ARGUMENT = 2,
  SPOTVOL_STATUS_NUMERICAL = 3,
  SPOTVOL_STATUS_BUFFER_TOO_SMALL = 4,
  SPOTVOL_STATUS_UNAVAILABLE = 5,
  SPOTVOL_STATUS_PANIC = 99,
} SpotvolStatus;

typedef enum {
  SPOTVOL_MATRIX_SIGMA_X = 0,
  SPOTVOL_MATRIX_SIGMA_C = 1,
  SPOTVOL_MATRIX_SIGMA_U = 2,
  SPOTVOL_MATRIX_LOADINGS = 3,
  SPOTVOL_MATRIX_PRECISION = 4,
} SpotvolMatrix;

/**
 * Spot volatility estimate at one time point.
 */
typedef struct SpotvolEstimate SpotvolEstimate;

/**
 * Filtered prices of `p` assets on a shared pseudo-grid.
 */
typedef struct SpotvolPanel SpotvolPanel;

/**
 * Estimation options. Non-positive bandwidths and a negative `c_rho` select
 * the data-driven choices; `fixed_k < 0` selects the eigenvalue ratio.
 */
typedef struct {
  SpotvolKernel spot_kernel;
  double h;
  int32_t fixed_k;
  /**
   * 0 for the default search limit.
   */
  uint32_t k_max;
  SpotvolRule rule;
  double c_rho;
  bool with_precision;
} SpotvolOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *spotvol_version(void);

/**
 * Message of the last failed call on this thread, or NULL. The pointer is
 * valid until the next call into the library from the same thread.
 */
const char *spotvol_last_error(void);

SpotvolOptions spotvol_options_default(void);

/**
 * Filter tick data into a panel.
 *
 * Asset `i` owns `counts[i]` consecutive entries of `times` and `prices`.
 * `delta0 <= 0` picks the default pseudo step, `b <= 0` cross-validates the
 * pre-averaging bandwidth per asset.
 *
 * # Safety
 * `counts` must point to `n_assets` values; `times` and `prices` to
 * `sum(counts)` values each; `out` must be writable.
 */
SpotvolStatus spotvol_panel_from_ticks(size_t n_assets,
                                       const size_t *counts,
                                       const double *times,
                                       const double *prices,
                                       double horizon,
                                       double delta0,
                                       double b,
                                       SpotvolKernel kernel,
                                       SpotvolPanel **out);

/**
 * Wrap already-filtered prices (`p x n_points`, row-major) on the grid
 * `0, delta0, ..., (n_points - 1) delta0`.
 *
 * # Safety
 * `values` must point to `p * n_points` values; `out` must be writable.
 */
SpotvolStatus spotvol_panel_from_values(size_t p,
                                        size_t n_points,
                                        const double *values,
                                        double delta0,
                                        SpotvolPanel **out);

/**
 * # Safety
 * `panel` must come from this library; output pointers may be NULL.
 */
SpotvolStatus spotvol_panel_dims(const SpotvolPanel *panel,
                                 size_t *p,
                                 size_t *n_increments,
                                 double *delta0);

/**
 * # Safety
 * `panel` must come from this library and not be used afterwards.
 */
void spotvol_panel_free(SpotvolPanel *panel);

/**
 * Estimate the spot volatility matrix at `tau`. `options` may be NULL for
 * the defaults.
 *
 * # Safety
 * `panel` must come from this library; `options` is NULL or valid; `out`
 * must be writable.
 */
SpotvolStatus spotvol_estimate(const SpotvolPanel *panel,
                               double tau,
                               const SpotvolOptions *options,
                               SpotvolEstimate **out);

/**
 * Dimension `p`, factor count and the diagnostics of an estimate. Output
 * pointers may be NULL.
 *
 * # Safety
 * `est` must come from this library.
 */
SpotvolStatus spotvol_estimate_info(const SpotvolEstimate *est,
                                    size_t *p,
                                    size_t *k_hat,
                                    double *h,
                                    double *c_rho,
                                    bool *c_rho_capped);

/**
 * Copy one matrix of the estimate row-major into `buf`. `len` is the buffer
 * length in doubles; the required length is written to `needed` (may be
 * NULL) even when the buffer is too small.
 *
 * # Safety
 * `est` must come from this library and `buf` must hold `len` doubles.
 */
SpotvolStatus spotvol_estimate_copy(const SpotvolEstimate *est,
                                    SpotvolMatrix which,
                                    double *buf,
                                    size_t len,
                                    size_t *needed);

/**
 * # Safety
 * `est` must come from this library and not be used afterwards.
 */
void spotvol_estimate_free(SpotvolEstimate *est);

/**
 * Apply a shrinkage rule with threshold `rho` to one value.
 *
 * # Safety
 * `out` must be writable.
 */
SpotvolStatus spotvol_shrink_value(double u, double rho, SpotvolRule rule, double *out);

/**
 * Smallest correlation-scaled threshold constant on `{0, 0.01, ..., 1}`
 * (refined by bisection) making the shrunk `p x p` matrix positive definite.
 *
 * # Safety
 * `matrix` must hold `p * p` values; `c_rho` must be writable and
 * `capped` may be NULL.
 */
SpotvolStatus spotvol_min_cpd(size_t p,
                              const double *matrix,
                              SpotvolRule rule,
                              double *c_rho,
                              bool *capped);

/**
 * Human-readable name of a status code (static string).
 */
const char *spotvol_status_name(SpotvolStatus status);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPOTVOL_H */
