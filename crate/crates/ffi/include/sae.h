#ifndef SAE_H
#define SAE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum SaeStatus {
  SAE_STATUS_OK = 0,
  SAE_STATUS_NULL_POINTER = 1,
  SAE_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Input data rejected.
   */
  SAE_STATUS_DATA = 3,
  /**
   * Singular design, failed search or too many failed replicates.
   */
  SAE_STATUS_NUMERICAL = 4,
  /**
   * Inputs valid on their own but incompatible with the request.
   */
  SAE_STATUS_CONFIG = 5,
  SAE_STATUS_PANIC = 6,
} SaeStatus;

/**
 * Design variance formula for `psi0`.
 */
typedef enum SaeDesign {
  SAE_DESIGN_SRSWOR = 0,
  SAE_DESIGN_GENERAL = 1,
  SAE_DESIGN_REGRESSION = 2,
} SaeDesign;

/**
 * Error-variance structure of the structured area-level fit.
 */
typedef enum SaeStructure {
  SAE_STRUCTURE_BASE = 0,
  SAE_STRUCTURE_CALIBRATED = 1,
  SAE_STRUCTURE_SRSWOR = 2,
} SaeStructure;

typedef enum SaeEstimator {
  SAE_ESTIMATOR_DIR = 0,
  SAE_ESTIMATOR_FHD = 1,
  SAE_ESTIMATOR_FHA = 2,
  SAE_ESTIMATOR_UA = 3,
  SAE_ESTIMATOR_U = 4,
  SAE_ESTIMATOR_YR = 5,
} SaeEstimator;

typedef struct SaeAreaData SaeAreaData;

typedef struct SaeFit SaeFit;

typedef struct SaeUnitSample SaeUnitSample;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a
 * successful call. Valid until the next call into the library.
 */
const char *sae_last_error_message(void);

/**
 * Unit-level sample of `d` areas. Area `k` holds `n_per_area[k]` units and
 * has population size `pop_sizes[k]`. `x` is `n × p` with the intercept
 * column included, where `n = Σ n_per_area`.
 *
 * # Safety
 * Array arguments must point to at least the stated number of readable
 * elements. `out` must be writable.
 */
enum SaeStatus sae_unit_sample_new(size_t d,
                                   const size_t *n_per_area,
                                   const size_t *pop_sizes,
                                   size_t p,
                                   const double *x,
                                   const double *y,
                                   const double *w,
                                   struct SaeUnitSample **out);

/**
 * Calibrate the base weights to the `d × p` area totals; the first total
 * of each area is `N_d`.
 *
 * # Safety
 * `sample` must be a live handle; `totals` must hold `d × p` values.
 */
enum SaeStatus sae_unit_sample_calibrate(struct SaeUnitSample *sample, const double *totals);

/**
 * # Safety
 * `sample` must be null or a handle from this library, not yet freed.
 */
void sae_unit_sample_free(struct SaeUnitSample *sample);

/**
 * Area-level data. `xbar` is `d × p`; `psi0` may be null.
 *
 * # Safety
 * Non-null arrays must hold `d` (or `d × p`) values; `out` must be
 * writable.
 */
enum SaeStatus sae_area_data_new(size_t d,
                                 size_t p,
                                 const double *ybar,
                                 const double *xbar,
                                 const size_t *pop_sizes,
                                 const size_t *sample_sizes,
                                 const double *w2,
                                 const double *psi0,
                                 struct SaeAreaData **out);

/**
 * Aggregate a unit sample with base or calibrated weights and attach the
 * direct variances. `xbar` is the `d × p` matrix of population means.
 *
 * # Safety
 * `sample` must be a live handle; `xbar` must hold `d × p` values.
 */
enum SaeStatus sae_area_data_from_sample(const struct SaeUnitSample *sample,
                                         bool calibrated,
                                         const double *xbar,
                                         enum SaeDesign design,
                                         struct SaeAreaData **out);

/**
 * # Safety
 * `data` must be null or a handle from this library, not yet freed.
 */
void sae_area_data_free(struct SaeAreaData *data);

/**
 * FH model with the direct variances as known ψ; every area needs `psi0`.
 *
 * # Safety
 * `data` must be a live handle; `out` must be writable.
 */
enum SaeStatus sae_fit_fh(const struct SaeAreaData *data, struct SaeFit **out);

/**
 * Area-level model with `ψ_d = σe² c_d`.
 *
 * # Safety
 * `data` must be a live handle; `out` must be writable.
 */
enum SaeStatus sae_fit_fh_structured(const struct SaeAreaData *data,
                                     enum SaeStructure structure,
                                     struct SaeFit **out);

/**
 * Nested-error model.
 *
 * # Safety
 * `sample` must be a live handle; `out` must be writable.
 */
enum SaeStatus sae_fit_bhf(const struct SaeUnitSample *sample, struct SaeFit **out);

/**
 * NaN for a null handle.
 *
 * # Safety
 * `fit` must be null or a live handle.
 */
double sae_fit_sigma_u2(const struct SaeFit *fit);

/**
 * NaN for a null handle or the known-ψ model.
 *
 * # Safety
 * `fit` must be null or a live handle.
 */
double sae_fit_sigma_e2(const struct SaeFit *fit);

/**
 * Number of regression coefficients; 0 for a null handle.
 *
 * # Safety
 * `fit` must be null or a live handle.
 */
size_t sae_fit_num_beta(const struct SaeFit *fit);

/**
 * # Safety
 * `fit` must be a live handle; `out` must hold `len` values.
 */
enum SaeStatus sae_fit_beta(const struct SaeFit *fit, double *out, size_t len);

/**
 * # Safety
 * `fit` must be null or a handle from this library, not yet freed.
 */
void sae_fit_free(struct SaeFit *fit);

/**
 * Area-level predictions for DIR, FHD, FHA or UA. Areas without an
 * estimate (FHD without `psi0`) get NaN. `gamma` may be null.
 *
 * # Safety
 * Handles must be live; `mu` (and `gamma` when non-null) must hold `len`
 * values, where `len` is the number of areas.
 */
enum SaeStatus sae_predict_area(const struct SaeFit *fit,
                                const struct SaeAreaData *data,
                                enum SaeEstimator estimator,
                                double *mu,
                                double *gamma,
                                size_t len);

/**
 * Unit-level predictions (U or YR); `xbar` is the `d × p` matrix of
 * population means and `gamma` may be null.
 *
 * # Safety
 * Handles must be live; `xbar` must hold `d × p` values and `mu` (and
 * `gamma` when non-null) `len` values.
 */
enum SaeStatus sae_predict_unit(const struct SaeFit *fit,
                                const struct SaeUnitSample *sample,
                                const double *xbar,
                                enum SaeEstimator estimator,
                                double *mu,
                                double *gamma,
                                size_t len);

/**
 * Prasad–Rao MSE `g1 + g2 + 2 g3` at the fitted σ̂u² and ψ of `fit`. For
 * a FH fit only areas with `psi0` are covered and the rest get NaN.
 *
 * # Safety
 * Handles must be live; `out` must hold `len` values.
 */
enum SaeStatus sae_mse_prasad_rao(const struct SaeFit *fit,
                                  const struct SaeAreaData *data,
                                  enum SaeEstimator estimator,
                                  double *out,
                                  size_t len);

/**
 * Parametric bootstrap MSE of U or YR with `b` replicates. `se` receives
 * the Monte Carlo standard errors and may be null.
 *
 * # Safety
 * Handles must be live; `xbar` must hold `d × p` values and `mse` (and
 * `se` when non-null) `len` values.
 */
enum SaeStatus sae_mse_bootstrap_unit(const struct SaeFit *fit,
                                      const struct SaeUnitSample *sample,
                                      const double *xbar,
                                      enum SaeEstimator estimator,
                                      size_t b,
                                      uint64_t seed,
                                      double *mse,
                                      double *se,
                                      size_t len);

/**
 * Library version, a static NUL-terminated string.
 */
const char *sae_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SAE_H */
