//! C ABI over `sae-core`: opaque handles, status codes and a thread-local
//! last-error message.
//!
//! Matrices are passed row-major. Area `k` of a handle built from arrays is
//! the `k`-th area of the input; outputs come back in the same order.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use nalgebra::{DMatrix, DVector};
use sae_core::calibration::{calibrate_sample, CalibrationTargets};
use sae_core::data::{aggregate, AreaDataset, AreaRow, AreaUnits, UnitSample, WeightKind};
use sae_core::direct::{attach_psi0, DesignKind};
use sae_core::mse::{bootstrap_mse_unit, mse_prasad_rao};
use sae_core::predictors::{area_predictor, unit_predictor, Estimator};
use sae_core::varcomp::{fit_reml_bhf, fit_reml_fh, fit_reml_structured_area};
use sae_core::varcomp::{StructureConstants, StructureSource, VarComponentFit};
use sae_core::SaeError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// Input data rejected.
    Data = 3,
    /// Singular design, failed search or too many failed replicates.
    Numerical = 4,
    /// Inputs valid on their own but incompatible with the request.
    Config = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaeEstimator {
    Dir = 0,
    Fhd = 1,
    Fha = 2,
    Ua = 3,
    U = 4,
    Yr = 5,
}

impl From<SaeEstimator> for Estimator {
    fn from(e: SaeEstimator) -> Self {
        match e {
            SaeEstimator::Dir => Estimator::Dir,
            SaeEstimator::Fhd => Estimator::Fhd,
            SaeEstimator::Fha => Estimator::Fha,
            SaeEstimator::Ua => Estimator::Ua,
            SaeEstimator::U => Estimator::U,
            SaeEstimator::Yr => Estimator::Yr,
        }
    }
}

/// Error-variance structure of the structured area-level fit.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaeStructure {
    Base = 0,
    Calibrated = 1,
    Srswor = 2,
}

/// Design variance formula for `psi0`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaeDesign {
    Srswor = 0,
    General = 1,
    Regression = 2,
}

pub struct SaeUnitSample {
    inner: UnitSample,
}

pub struct SaeAreaData {
    inner: AreaDataset,
}

pub struct SaeFit {
    inner: VarComponentFit,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(SaeStatus, String);

impl From<SaeError> for Failure {
    fn from(e: SaeError) -> Self {
        let status = match e.exit_code() {
            1 => SaeStatus::Config,
            3 => SaeStatus::Numerical,
            _ => SaeStatus::Data,
        };
        Failure(status, e.to_string())
    }
}

type FfiResult<T> = std::result::Result<T, Failure>;

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(SaeStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> FfiResult<()>) -> SaeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SaeStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("panic inside sae");
            SaeStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure(SaeStatus::NullPointer, format!("`{what}` is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> FfiResult<&'a mut [T]> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure(SaeStatus::NullPointer, format!("`{what}` is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> FfiResult<&'a T> {
    p.as_ref()
        .ok_or_else(|| Failure(SaeStatus::NullPointer, format!("`{what}` is null")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> FfiResult<()> {
    if out.is_null() {
        return Err(Failure(SaeStatus::NullPointer, "`out` is null".into()));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Area ids sort in input order.
fn area_id(k: usize) -> String {
    format!("{k:08}")
}

fn means(xbar: &[f64], d: usize, p: usize) -> Vec<DVector<f64>> {
    (0..d)
        .map(|k| DVector::from_column_slice(&xbar[k * p..(k + 1) * p]))
        .collect()
}

/// Message of the last failed call on this thread; empty after a
/// successful call. Valid until the next call into the library.
#[no_mangle]
pub extern "C" fn sae_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Unit-level sample of `d` areas. Area `k` holds `n_per_area[k]` units and
/// has population size `pop_sizes[k]`. `x` is `n × p` with the intercept
/// column included, where `n = Σ n_per_area`.
///
/// # Safety
/// Array arguments must point to at least the stated number of readable
/// elements. `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sae_unit_sample_new(
    d: usize,
    n_per_area: *const usize,
    pop_sizes: *const usize,
    p: usize,
    x: *const f64,
    y: *const f64,
    w: *const f64,
    out: *mut *mut SaeUnitSample,
) -> SaeStatus {
    guard(|| {
        if d == 0 || p == 0 {
            return Err(invalid("need at least one area and one covariate"));
        }
        let sizes = slice(n_per_area, d, "n_per_area")?;
        let pops = slice(pop_sizes, d, "pop_sizes")?;
        let n: usize = sizes.iter().sum();
        let (x, y, w) = (slice(x, n * p, "x")?, slice(y, n, "y")?, slice(w, n, "w")?);
        let mut start = 0;
        let areas = (0..d)
            .map(|k| {
                let m = sizes[k];
                let unit = AreaUnits {
                    area_id: area_id(k),
                    pop_size: pops[k],
                    y: y[start..start + m].to_vec(),
                    x: DMatrix::from_row_slice(m, p, &x[start * p..(start + m) * p]),
                    w: w[start..start + m].to_vec(),
                    w_cal: None,
                };
                start += m;
                unit
            })
            .collect();
        put(
            out,
            SaeUnitSample {
                inner: UnitSample::new(areas)?,
            },
        )
    })
}

/// Calibrate the base weights to the `d × p` area totals; the first total
/// of each area is `N_d`.
///
/// # Safety
/// `sample` must be a live handle; `totals` must hold `d × p` values.
#[no_mangle]
pub unsafe extern "C" fn sae_unit_sample_calibrate(
    sample: *mut SaeUnitSample,
    totals: *const f64,
) -> SaeStatus {
    guard(|| {
        let s = sample
            .as_mut()
            .ok_or_else(|| Failure(SaeStatus::NullPointer, "`sample` is null".into()))?;
        let (d, p) = (s.inner.num_areas(), s.inner.p());
        let t = slice(totals, d * p, "totals")?;
        let targets = CalibrationTargets {
            area_ids: s.inner.areas.iter().map(|a| a.area_id.clone()).collect(),
            totals: means(t, d, p),
        };
        s.inner = calibrate_sample(&s.inner, &targets)?.0;
        Ok(())
    })
}

/// # Safety
/// `sample` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sae_unit_sample_free(sample: *mut SaeUnitSample) {
    if !sample.is_null() {
        drop(Box::from_raw(sample));
    }
}

/// Area-level data. `xbar` is `d × p`; `psi0` may be null.
///
/// # Safety
/// Non-null arrays must hold `d` (or `d × p`) values; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn sae_area_data_new(
    d: usize,
    p: usize,
    ybar: *const f64,
    xbar: *const f64,
    pop_sizes: *const usize,
    sample_sizes: *const usize,
    w2: *const f64,
    psi0: *const f64,
    out: *mut *mut SaeAreaData,
) -> SaeStatus {
    guard(|| {
        if d == 0 || p == 0 {
            return Err(invalid("need at least one area and one covariate"));
        }
        let ybar = slice(ybar, d, "ybar")?;
        let xbar = means(slice(xbar, d * p, "xbar")?, d, p);
        let pops = slice(pop_sizes, d, "pop_sizes")?;
        let ns = slice(sample_sizes, d, "sample_sizes")?;
        let w2 = slice(w2, d, "w2")?;
        let psi0 = if psi0.is_null() {
            None
        } else {
            Some(slice(psi0, d, "psi0")?)
        };
        let rows = xbar
            .into_iter()
            .enumerate()
            .map(|(k, xb)| AreaRow {
                area_id: area_id(k),
                pop_size: pops[k],
                sample_size: ns[k],
                ybar: ybar[k],
                xbar: xb,
                w2: w2[k],
                wdot: pops[k] as f64,
                psi0: psi0.map(|p| p[k]),
            })
            .collect();
        put(
            out,
            SaeAreaData {
                inner: AreaDataset::new(rows)?,
            },
        )
    })
}

/// Aggregate a unit sample with base or calibrated weights and attach the
/// direct variances. `xbar` is the `d × p` matrix of population means.
///
/// # Safety
/// `sample` must be a live handle; `xbar` must hold `d × p` values.
#[no_mangle]
pub unsafe extern "C" fn sae_area_data_from_sample(
    sample: *const SaeUnitSample,
    calibrated: bool,
    xbar: *const f64,
    design: SaeDesign,
    out: *mut *mut SaeAreaData,
) -> SaeStatus {
    guard(|| {
        let s = &handle(sample, "sample")?.inner;
        let xb = means(
            slice(xbar, s.num_areas() * s.p(), "xbar")?,
            s.num_areas(),
            s.p(),
        );
        let kind = if calibrated {
            WeightKind::Calibrated
        } else {
            WeightKind::Base
        };
        let design = match design {
            SaeDesign::Srswor => DesignKind::Srswor,
            SaeDesign::General => DesignKind::General,
            SaeDesign::Regression => DesignKind::Regression,
        };
        let data = attach_psi0(&aggregate(s, kind, &xb)?, s, kind, design)?;
        put(out, SaeAreaData { inner: data })
    })
}

/// # Safety
/// `data` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sae_area_data_free(data: *mut SaeAreaData) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// FH model with the direct variances as known ψ; every area needs `psi0`.
///
/// # Safety
/// `data` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sae_fit_fh(data: *const SaeAreaData, out: *mut *mut SaeFit) -> SaeStatus {
    guard(|| {
        let data = &handle(data, "data")?.inner;
        let psi = data
            .psi0()
            .ok_or_else(|| Failure(SaeStatus::Data, "psi0 is missing for some areas".into()))?;
        put(
            out,
            SaeFit {
                inner: fit_reml_fh(data, &psi)?,
            },
        )
    })
}

/// Area-level model with `ψ_d = σe² c_d`.
///
/// # Safety
/// `data` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sae_fit_fh_structured(
    data: *const SaeAreaData,
    structure: SaeStructure,
    out: *mut *mut SaeFit,
) -> SaeStatus {
    guard(|| {
        let data = &handle(data, "data")?.inner;
        let source = match structure {
            SaeStructure::Base => StructureSource::Base,
            SaeStructure::Calibrated => StructureSource::Calibrated,
            SaeStructure::Srswor => StructureSource::Srswor,
        };
        let c = StructureConstants::from_area(data, source);
        put(
            out,
            SaeFit {
                inner: fit_reml_structured_area(data, &c)?,
            },
        )
    })
}

/// Nested-error model.
///
/// # Safety
/// `sample` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sae_fit_bhf(
    sample: *const SaeUnitSample,
    out: *mut *mut SaeFit,
) -> SaeStatus {
    guard(|| {
        put(
            out,
            SaeFit {
                inner: fit_reml_bhf(&handle(sample, "sample")?.inner)?,
            },
        )
    })
}

/// NaN for a null handle.
///
/// # Safety
/// `fit` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sae_fit_sigma_u2(fit: *const SaeFit) -> f64 {
    fit.as_ref().map_or(f64::NAN, |f| f.inner.sigma_u2)
}

/// NaN for a null handle or the known-ψ model.
///
/// # Safety
/// `fit` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sae_fit_sigma_e2(fit: *const SaeFit) -> f64 {
    fit.as_ref()
        .and_then(|f| f.inner.sigma_e2)
        .unwrap_or(f64::NAN)
}

/// Number of regression coefficients; 0 for a null handle.
///
/// # Safety
/// `fit` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sae_fit_num_beta(fit: *const SaeFit) -> usize {
    fit.as_ref().map_or(0, |f| f.inner.beta.len())
}

/// # Safety
/// `fit` must be a live handle; `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn sae_fit_beta(fit: *const SaeFit, out: *mut f64, len: usize) -> SaeStatus {
    guard(|| {
        let f = &handle(fit, "fit")?.inner;
        if len != f.beta.len() {
            return Err(invalid(format!(
                "`len` is {len}, the fit has {} coefficients",
                f.beta.len()
            )));
        }
        slice_mut(out, len, "out")?.copy_from_slice(f.beta.as_slice());
        Ok(())
    })
}

/// # Safety
/// `fit` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sae_fit_free(fit: *mut SaeFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

fn write_estimates(
    rows: &[(usize, f64, f64)],
    d: usize,
    mu: &mut [f64],
    gamma: Option<&mut [f64]>,
) {
    mu.fill(f64::NAN);
    let mut gamma = gamma;
    if let Some(g) = gamma.as_deref_mut() {
        g.fill(f64::NAN);
    }
    for &(k, m, g) in rows.iter().filter(|r| r.0 < d) {
        mu[k] = m;
        if let Some(out) = gamma.as_deref_mut() {
            out[k] = g;
        }
    }
}

fn index_of(id: &str) -> usize {
    id.parse().unwrap_or(usize::MAX)
}

/// Area-level predictions for DIR, FHD, FHA or UA. Areas without an
/// estimate (FHD without `psi0`) get NaN. `gamma` may be null.
///
/// # Safety
/// Handles must be live; `mu` (and `gamma` when non-null) must hold `len`
/// values, where `len` is the number of areas.
#[no_mangle]
pub unsafe extern "C" fn sae_predict_area(
    fit: *const SaeFit,
    data: *const SaeAreaData,
    estimator: SaeEstimator,
    mu: *mut f64,
    gamma: *mut f64,
    len: usize,
) -> SaeStatus {
    guard(|| {
        let (f, data) = (&handle(fit, "fit")?.inner, &handle(data, "data")?.inner);
        let d = data.num_areas();
        if len != d {
            return Err(invalid(format!("`len` is {len}, the data have {d} areas")));
        }
        let est = if estimator == SaeEstimator::Dir {
            sae_core::predictors::direct_predictor(data)
        } else {
            area_predictor(f, data, estimator.into())?
        };
        let rows: Vec<_> = est
            .rows
            .iter()
            .map(|r| (index_of(&r.area_id), r.mu_hat, r.gamma))
            .collect();
        let g = if gamma.is_null() {
            None
        } else {
            Some(slice_mut(gamma, len, "gamma")?)
        };
        write_estimates(&rows, d, slice_mut(mu, len, "mu")?, g);
        Ok(())
    })
}

/// Unit-level predictions (U or YR); `xbar` is the `d × p` matrix of
/// population means and `gamma` may be null.
///
/// # Safety
/// Handles must be live; `xbar` must hold `d × p` values and `mu` (and
/// `gamma` when non-null) `len` values.
#[no_mangle]
pub unsafe extern "C" fn sae_predict_unit(
    fit: *const SaeFit,
    sample: *const SaeUnitSample,
    xbar: *const f64,
    estimator: SaeEstimator,
    mu: *mut f64,
    gamma: *mut f64,
    len: usize,
) -> SaeStatus {
    guard(|| {
        let (f, s) = (&handle(fit, "fit")?.inner, &handle(sample, "sample")?.inner);
        let d = s.num_areas();
        if len != d {
            return Err(invalid(format!("`len` is {len}, the sample has {d} areas")));
        }
        let xb = means(slice(xbar, d * s.p(), "xbar")?, d, s.p());
        let est = unit_predictor(f, s, &xb, estimator.into())?;
        let rows: Vec<_> = est
            .rows
            .iter()
            .map(|r| (index_of(&r.area_id), r.mu_hat, r.gamma))
            .collect();
        let g = if gamma.is_null() {
            None
        } else {
            Some(slice_mut(gamma, len, "gamma")?)
        };
        write_estimates(&rows, d, slice_mut(mu, len, "mu")?, g);
        Ok(())
    })
}

/// Prasad–Rao MSE `g1 + g2 + 2 g3` at the fitted σ̂u² and ψ of `fit`. For
/// a FH fit only areas with `psi0` are covered and the rest get NaN.
///
/// # Safety
/// Handles must be live; `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn sae_mse_prasad_rao(
    fit: *const SaeFit,
    data: *const SaeAreaData,
    estimator: SaeEstimator,
    out: *mut f64,
    len: usize,
) -> SaeStatus {
    guard(|| {
        let (f, data) = (&handle(fit, "fit")?.inner, &handle(data, "data")?.inner);
        let d = data.num_areas();
        if len != d {
            return Err(invalid(format!("`len` is {len}, the data have {d} areas")));
        }
        let covered = if estimator == SaeEstimator::Fhd {
            data.with_psi0()
        } else {
            data.clone()
        };
        let report = mse_prasad_rao(f, &f.psi, &covered, estimator.into())?;
        let rows: Vec<_> = report
            .rows
            .iter()
            .map(|r| (index_of(&r.area_id), r.mse, f64::NAN))
            .collect();
        write_estimates(&rows, d, slice_mut(out, len, "out")?, None);
        Ok(())
    })
}

/// Parametric bootstrap MSE of U or YR with `b` replicates. `se` receives
/// the Monte Carlo standard errors and may be null.
///
/// # Safety
/// Handles must be live; `xbar` must hold `d × p` values and `mse` (and
/// `se` when non-null) `len` values.
#[no_mangle]
pub unsafe extern "C" fn sae_mse_bootstrap_unit(
    fit: *const SaeFit,
    sample: *const SaeUnitSample,
    xbar: *const f64,
    estimator: SaeEstimator,
    b: usize,
    seed: u64,
    mse: *mut f64,
    se: *mut f64,
    len: usize,
) -> SaeStatus {
    guard(|| {
        let (f, s) = (&handle(fit, "fit")?.inner, &handle(sample, "sample")?.inner);
        let d = s.num_areas();
        if len != d {
            return Err(invalid(format!("`len` is {len}, the sample has {d} areas")));
        }
        let xb = means(slice(xbar, d * s.p(), "xbar")?, d, s.p());
        let report = bootstrap_mse_unit(f, s, &xb, estimator.into(), b, seed)?;
        let rows: Vec<_> = report
            .rows
            .iter()
            .map(|r| (index_of(&r.area_id), r.mse, r.se.unwrap_or(f64::NAN)))
            .collect();
        let se = if se.is_null() {
            None
        } else {
            Some(slice_mut(se, len, "se")?)
        };
        write_estimates(&rows, d, slice_mut(mse, len, "mse")?, se);
        Ok(())
    })
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sae_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
