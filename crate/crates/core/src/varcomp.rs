//! REML fitting of variance components for the Fay–Herriot model with known
//! error variances, the area-level model with structured error variances
//! `ψ_d = σe² c_d`, and the unit-level nested-error model; plus the WLS and
//! pseudo-weighted estimators of β.
//!
//! The two-parameter likelihoods are profiled: writing the covariance as
//! `τ W(a)` with `a ∈ [0, 1]`, the scale `τ` has the closed form
//! `τ̂(a) = Q(a) / (m − p)` and the remaining one-dimensional problem is
//! solved by a scan plus Brent search, which returns boundary optima exactly.

use nalgebra::{DMatrix, DVector};

use crate::data::{AreaDataset, UnitSample, WeightKind};
use crate::error::{Result, SaeError};
use crate::linalg::{check_conditioning, logdet_spd, sample_variance, solve_spd};
use crate::optim::{maximize_scalar, unit_interval_grid, variance_grid, Maximum, ScanOptions};

/// Relative residual sum of squares below which the data are treated as an
/// exact fit and all variance components are set to zero.
const EXACT_FIT_TOL: f64 = 1e-24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitMethod {
    RemlFh,
    RemlStructuredArea,
    RemlBhf,
}

impl FitMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            FitMethod::RemlFh => "reml-fh",
            FitMethod::RemlStructuredArea => "reml-structured-area",
            FitMethod::RemlBhf => "reml-bhf",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarComponentFit {
    pub beta: DVector<f64>,
    pub sigma_u2: f64,
    /// Unset for the known-ψ model.
    pub sigma_e2: Option<f64>,
    /// Error variances implied by the fit: the supplied ψ for the known-ψ
    /// model, `σ̂e² c_d` for the structured model and `σ̂e² / n_d` for the
    /// unit-level model.
    pub psi: Vec<f64>,
    pub method: FitMethod,
    /// Error-variance structure of a structured area-level fit.
    pub structure: Option<StructureSource>,
    /// Restricted log-likelihood at the optimum, without the `2π` constant.
    pub loglik_restricted: f64,
    pub converged: bool,
    /// Objective evaluations used by the search.
    pub iterations: usize,
    /// Some variance component sits exactly on zero.
    pub at_boundary: bool,
    /// `max_d X̄_d'(Σ X̄ X̄')^{-1} X̄_d` for area-level fits.
    pub max_leverage: Option<f64>,
    pub warnings: Vec<String>,
}

impl VarComponentFit {
    /// `σ̂e² c_d` under the given structure; needs a fitted `σ̂e²`.
    pub fn structured_psi(&self, c: &StructureConstants) -> Result<Vec<f64>> {
        let se2 = self.sigma_e2.ok_or_else(|| {
            SaeError::Config(format!("{} fit has no sigma_e2", self.method.as_str()))
        })?;
        Ok(c.c.iter().map(|c| se2 * c).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StructureSource {
    /// `c_d = w_d·^{-2} Σ w²`.
    Base,
    /// `c_d = N_d^{-2} Σ (w^C)²`.
    Calibrated,
    /// `c_d = 1 / n_d`.
    Srswor,
}

impl StructureSource {
    pub fn weight_kind(self) -> WeightKind {
        match self {
            StructureSource::Calibrated => WeightKind::Calibrated,
            _ => WeightKind::Base,
        }
    }
}

/// Per-area constants with `ψ_d(σe²) = σe² c_d`.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureConstants {
    pub c: Vec<f64>,
    pub source: StructureSource,
}

impl StructureConstants {
    /// From area aggregates. `W2` must have been computed with the weights
    /// matching `source`.
    pub fn from_area(data: &AreaDataset, source: StructureSource) -> Self {
        let c = data
            .rows
            .iter()
            .map(|r| match source {
                StructureSource::Base => r.w2 / (r.wdot * r.wdot),
                StructureSource::Calibrated => r.w2 / (r.pop_size as f64).powi(2),
                StructureSource::Srswor => 1.0 / r.sample_size as f64,
            })
            .collect();
        StructureConstants { c, source }
    }

    pub fn from_sample(sample: &UnitSample, source: StructureSource) -> Result<Self> {
        let c = sample
            .areas
            .iter()
            .map(|a| {
                Ok(match source {
                    StructureSource::Srswor => 1.0 / a.n() as f64,
                    StructureSource::Base => {
                        let wdot: f64 = a.w.iter().sum();
                        a.w.iter().map(|w| w * w).sum::<f64>() / (wdot * wdot)
                    }
                    StructureSource::Calibrated => {
                        let w = a.weights(WeightKind::Calibrated)?;
                        w.iter().map(|w| w * w).sum::<f64>() / (a.pop_size as f64).powi(2)
                    }
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(StructureConstants { c, source })
    }
}

fn search_failed(m: &Maximum, what: &str) -> SaeError {
    SaeError::NonConvergence {
        iterations: m.evaluations,
        trace: format!("{what}: last x = {:e}, objective = {:e}", m.x, m.value),
    }
}

/// WLS estimator `(Σ X̄X̄'/(σu²+ψ))^{-1} Σ X̄ ȳ/(σu²+ψ)`.
///
/// For `σu² > 0` this is the `γ_d`-weighted form; at `σu² = 0` it is its
/// continuous limit.
pub fn wls_beta_area(sigma_u2: f64, psi: &[f64], data: &AreaDataset) -> Result<DVector<f64>> {
    let v: Vec<f64> = psi.iter().map(|p| sigma_u2 + p).collect();
    let weights: Vec<f64> = if v.iter().all(|v| *v == 0.0) {
        vec![1.0; v.len()]
    } else if v.iter().any(|v| !(*v > 0.0)) {
        return Err(SaeError::Validation(
            "WLS weights need sigma_u2 + psi_d > 0 in every area".into(),
        ));
    } else {
        v.iter().map(|v| 1.0 / v).collect()
    };
    let p = data.p();
    let mut a = DMatrix::zeros(p, p);
    let mut b = DVector::zeros(p);
    for (r, w) in data.rows.iter().zip(&weights) {
        a += &r.xbar * r.xbar.transpose() * *w;
        b += &r.xbar * (r.ybar * w);
    }
    check_conditioning(&a, "weighted area cross-product matrix")?;
    solve_spd(&a, &b, "weighted area cross-product matrix")
}

/// Pseudo-weighted estimator of β from unit-level data,
/// `[ΣΣ w x (x − γ_d x̄_dw)']^{-1} ΣΣ w (x − γ_d x̄_dw) y`, with
/// `γ_d = σu² / (σu² + ψ_d(σe²))` under the structure matching `kind`.
pub fn pseudo_beta_unit(
    sigma_u2: f64,
    sigma_e2: f64,
    sample: &UnitSample,
    kind: WeightKind,
) -> Result<DVector<f64>> {
    let source = match kind {
        WeightKind::Base => StructureSource::Base,
        WeightKind::Calibrated => StructureSource::Calibrated,
    };
    let c = StructureConstants::from_sample(sample, source)?;
    let p = sample.p();
    let mut a = DMatrix::zeros(p, p);
    let mut b = DVector::zeros(p);
    for (area, c) in sample.areas.iter().zip(&c.c) {
        let psi = sigma_e2 * c;
        let gamma = if sigma_u2 + psi > 0.0 {
            sigma_u2 / (sigma_u2 + psi)
        } else {
            0.0
        };
        let w = area.weights(kind)?;
        let wdot: f64 = w.iter().sum();
        let mut xbar = DVector::zeros(p);
        for (i, wi) in w.iter().enumerate() {
            xbar += area.x.row(i).transpose() * *wi;
        }
        xbar /= wdot;
        for (i, wi) in w.iter().enumerate() {
            let xi = area.x.row(i).transpose();
            let centered = &xi - &xbar * gamma;
            a += &xi * centered.transpose() * *wi;
            b += centered * (wi * area.y[i]);
        }
    }
    check_conditioning(&a, "pseudo-weighted cross-product matrix")?;
    a.lu()
        .solve(&b)
        .ok_or_else(|| SaeError::Singular("pseudo-weighted cross-product matrix".into()))
}

fn area_design(data: &AreaDataset) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let d = data.num_areas();
    let p = data.p();
    if d <= p {
        return Err(SaeError::Validation(format!(
            "need more areas than covariates (D = {d}, p = {p})"
        )));
    }
    let x = data.design();
    check_conditioning(&(x.transpose() * &x), "area design X̄'X̄")?;
    Ok((x, DVector::from_vec(data.ybar())))
}

fn max_leverage(x: &DMatrix<f64>) -> Option<f64> {
    let xtx_inv = (x.transpose() * x).try_inverse()?;
    (0..x.nrows())
        .map(|d| {
            let r = x.row(d);
            (r * &xtx_inv * r.transpose())[(0, 0)]
        })
        .reduce(f64::max)
}

struct GlsPart {
    beta: DVector<f64>,
    /// `r'W^{-1}r`.
    q: f64,
    logdet_a: f64,
}

/// GLS pieces for a diagonal covariance `diag(v)` (any positive scale).
fn gls_diag(x: &DMatrix<f64>, y: &DVector<f64>, v: &[f64]) -> Option<GlsPart> {
    let p = x.ncols();
    let mut a = DMatrix::zeros(p, p);
    let mut b = DVector::zeros(p);
    for (d, vd) in v.iter().enumerate() {
        let xd = x.row(d).transpose();
        a += &xd * xd.transpose() / *vd;
        b += xd * (y[d] / vd);
    }
    let ch = a.clone().cholesky()?;
    let beta = ch.solve(&b);
    let r = y - x * &beta;
    let q = r.iter().zip(v).map(|(r, v)| r * r / v).sum();
    let logdet_a = 2.0 * ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Some(GlsPart { beta, q, logdet_a })
}

/// Restricted log-likelihood of the area-level model with variances `v`,
/// without the `2π` constant. `None` if some `v_d ≤ 0`.
pub fn area_restricted_loglik(data: &AreaDataset, v: &[f64]) -> Option<f64> {
    if v.iter().any(|v| !(*v > 0.0)) {
        return None;
    }
    let x = data.design();
    let y = DVector::from_vec(data.ybar());
    let g = gls_diag(&x, &y, v)?;
    Some(-0.5 * (v.iter().map(|v| v.ln()).sum::<f64>() + g.logdet_a + g.q))
}

fn is_exact_fit(x: &DMatrix<f64>, y: &DVector<f64>) -> bool {
    let xtx = x.transpose() * x;
    let Ok(beta) = solve_spd(&xtx, &(x.transpose() * y), "") else {
        return false;
    };
    let rss = (y - x * beta).norm_squared();
    rss <= EXACT_FIT_TOL * y.norm_squared().max(f64::MIN_POSITIVE)
}

/// REML fit of the Fay–Herriot model with known error variances `psi`.
pub fn fit_reml_fh(data: &AreaDataset, psi: &[f64]) -> Result<VarComponentFit> {
    let (x, y) = area_design(data)?;
    if psi.len() != data.num_areas() {
        return Err(SaeError::Validation(format!(
            "{} error variances for {} areas",
            psi.len(),
            data.num_areas()
        )));
    }
    if let Some(i) = psi.iter().position(|p| !(*p > 0.0)) {
        return Err(SaeError::Validation(format!(
            "area `{}`: error variance must be positive",
            data.rows[i].area_id
        )));
    }
    let var_y = sample_variance(y.as_slice());
    let hi = if var_y > 0.0 { 100.0 * var_y } else { 1.0 };
    let objective = |s: f64| {
        let v: Vec<f64> = psi.iter().map(|p| p + s).collect();
        match gls_diag(&x, &y, &v) {
            Some(g) => -0.5 * (v.iter().map(|v| v.ln()).sum::<f64>() + g.logdet_a + g.q),
            None => f64::NEG_INFINITY,
        }
    };
    let opts = ScanOptions {
        grid: variance_grid(hi, 200, 40),
        xtol: 1e-12 * hi.max(1.0),
        max_iter: 500,
    };
    let m = maximize_scalar(objective, &opts);
    if !m.converged || !m.value.is_finite() {
        return Err(search_failed(&m, "fh restricted likelihood"));
    }
    let sigma_u2 = m.x;
    let beta = wls_beta_area(sigma_u2, psi, data)?;
    let mut warnings = Vec::new();
    if sigma_u2 == 0.0 {
        warnings.push("sigma_u2 estimated as 0: predictions are purely synthetic".into());
    }
    Ok(VarComponentFit {
        beta,
        sigma_u2,
        sigma_e2: None,
        psi: psi.to_vec(),
        method: FitMethod::RemlFh,
        structure: None,
        loglik_restricted: m.value,
        converged: true,
        iterations: m.evaluations,
        at_boundary: sigma_u2 == 0.0,
        max_leverage: max_leverage(&x),
        warnings,
    })
}

/// REML fit of the area-level model with `Var(ȳ_d) = σu² + σe² c_d`.
pub fn fit_reml_structured_area(
    data: &AreaDataset,
    c: &StructureConstants,
) -> Result<VarComponentFit> {
    let (x, y) = area_design(data)?;
    let d = data.num_areas();
    let p = data.p();
    if d < 3 {
        return Err(SaeError::Validation(format!(
            "structured fit needs at least 3 areas, got {d}"
        )));
    }
    if c.c.len() != d || c.c.iter().any(|c| !(*c > 0.0)) {
        return Err(SaeError::Validation(
            "structure constants must be positive, one per area".into(),
        ));
    }
    let cmin = c.c.iter().copied().fold(f64::INFINITY, f64::min);
    let cmax = c.c.iter().copied().fold(0.0, f64::max);
    if cmax - cmin <= 1e-12 * cmax {
        return Err(SaeError::NotIdentified(
            "σu² and σe² not separately identified from area data (all c_d equal)".into(),
        ));
    }
    let cbar = c.c.iter().sum::<f64>() / d as f64;
    let leverage = max_leverage(&x);

    if is_exact_fit(&x, &y) {
        let beta = wls_beta_area(0.0, &vec![1.0; d], data)?;
        return Ok(VarComponentFit {
            beta,
            sigma_u2: 0.0,
            sigma_e2: Some(0.0),
            psi: vec![0.0; d],
            method: FitMethod::RemlStructuredArea,
            structure: Some(c.source),
            loglik_restricted: f64::INFINITY,
            converged: true,
            iterations: 0,
            at_boundary: true,
            max_leverage: leverage,
            warnings: vec!["exact fit: all variance components are 0".into()],
        });
    }

    let dof = (d - p) as f64;
    let w_of = |a: f64| -> Vec<f64> { c.c.iter().map(|c| a + (1.0 - a) * c / cbar).collect() };
    let objective = |a: f64| {
        let w = w_of(a);
        match gls_diag(&x, &y, &w) {
            Some(g) if g.q > 0.0 => {
                -0.5 * (dof * (g.q / dof).ln()
                    + w.iter().map(|w| w.ln()).sum::<f64>()
                    + g.logdet_a
                    + dof)
            }
            _ => f64::NEG_INFINITY,
        }
    };
    let opts = ScanOptions {
        grid: unit_interval_grid(100, 16),
        xtol: 1e-12,
        max_iter: 500,
    };
    let m = maximize_scalar(objective, &opts);
    if !m.converged || !m.value.is_finite() {
        return Err(search_failed(&m, "structured restricted likelihood"));
    }
    let a = m.x;
    let w = w_of(a);
    let g = gls_diag(&x, &y, &w).ok_or_else(|| SaeError::Singular("structured GLS".into()))?;
    let tau = g.q / dof;
    let sigma_u2 = tau * a;
    let sigma_e2 = tau * (1.0 - a) / cbar;
    let psi: Vec<f64> = c.c.iter().map(|c| sigma_e2 * c).collect();
    let beta = if sigma_u2 == 0.0 && sigma_e2 == 0.0 {
        g.beta
    } else {
        wls_beta_area(sigma_u2, &psi, data)?
    };
    let mut warnings = Vec::new();
    if sigma_u2 == 0.0 {
        warnings.push("sigma_u2 estimated as 0: predictions are purely synthetic".into());
    }
    Ok(VarComponentFit {
        beta,
        sigma_u2,
        sigma_e2: Some(sigma_e2),
        psi,
        method: FitMethod::RemlStructuredArea,
        structure: Some(c.source),
        loglik_restricted: m.value,
        converged: true,
        iterations: m.evaluations,
        at_boundary: sigma_u2 == 0.0 || sigma_e2 == 0.0,
        max_leverage: leverage,
        warnings,
    })
}

/// Response-free summaries of a unit-level design, reusable across
/// bootstrap replicates that share covariates.
#[derive(Debug, Clone)]
pub struct BhfDesign {
    p: usize,
    n: usize,
    sizes: Vec<usize>,
    xtx: Vec<DMatrix<f64>>,
    /// `X_d' 1`.
    xsum: Vec<DVector<f64>>,
    xtx_total: DMatrix<f64>,
}

impl BhfDesign {
    pub fn new(sample: &UnitSample) -> Result<Self> {
        let p = sample.p();
        let n = sample.total_n();
        if sample.num_areas() < 2 {
            return Err(SaeError::Validation(
                "nested-error fit needs at least 2 areas".into(),
            ));
        }
        if n <= p + 1 {
            return Err(SaeError::Validation(format!(
                "nested-error fit needs n > p + 1 (n = {n}, p = {p})"
            )));
        }
        let mut xtx = Vec::with_capacity(sample.num_areas());
        let mut xsum = Vec::with_capacity(sample.num_areas());
        let mut total = DMatrix::zeros(p, p);
        for a in &sample.areas {
            let m = a.x.transpose() * &a.x;
            total += &m;
            xtx.push(m);
            xsum.push(a.x.row_sum().transpose());
        }
        check_conditioning(&total, "unit-level design X'X")?;
        Ok(BhfDesign {
            p,
            n,
            sizes: sample.areas.iter().map(|a| a.n()).collect(),
            xtx,
            xsum,
            xtx_total: total,
        })
    }
}

struct BhfResponse {
    xty: Vec<DVector<f64>>,
    ysum: Vec<f64>,
    yty: Vec<f64>,
}

impl BhfResponse {
    fn new(sample: &UnitSample, y: &[Vec<f64>]) -> Self {
        let mut xty = Vec::with_capacity(y.len());
        let mut ysum = Vec::with_capacity(y.len());
        let mut yty = Vec::with_capacity(y.len());
        for (a, y) in sample.areas.iter().zip(y) {
            let yv = DVector::from_column_slice(y);
            xty.push(a.x.transpose() * &yv);
            ysum.push(y.iter().sum());
            yty.push(y.iter().map(|v| v * v).sum());
        }
        BhfResponse { xty, ysum, yty }
    }
}

/// GLS pieces for `W_d = (1 − a) I + a 11'`, scaled so that `τ W` is the
/// covariance.
fn gls_bhf(design: &BhfDesign, resp: &BhfResponse, a: f64) -> Option<(GlsPart, f64)> {
    let p = design.p;
    let one_minus = 1.0 - a;
    let mut am = DMatrix::zeros(p, p);
    let mut b = DVector::zeros(p);
    let mut logdet_w = 0.0;
    let mut g_over_n = Vec::with_capacity(design.sizes.len());
    for (d, &nd) in design.sizes.iter().enumerate() {
        let n = nd as f64;
        let k = a / (one_minus + n * a);
        g_over_n.push(k);
        am += (&design.xtx[d] - &design.xsum[d] * design.xsum[d].transpose() * k) / one_minus;
        b += (&resp.xty[d] - &design.xsum[d] * (resp.ysum[d] * k)) / one_minus;
        logdet_w += (n - 1.0) * one_minus.ln() + (one_minus + n * a).ln();
    }
    let ch = am.clone().cholesky()?;
    let beta = ch.solve(&b);
    let mut q = 0.0;
    for (d, k) in g_over_n.iter().enumerate() {
        let xb = design.xsum[d].dot(&beta);
        let rr = resp.yty[d] - 2.0 * resp.xty[d].dot(&beta) + beta.dot(&(&design.xtx[d] * &beta));
        let rs = resp.ysum[d] - xb;
        q += (rr - k * rs * rs) / one_minus;
    }
    let logdet_a = 2.0 * ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Some((GlsPart { beta, q, logdet_a }, logdet_w))
}

/// REML fit of the nested-error model `y = x'β + u_d + e` on the unweighted
/// unit data.
pub fn fit_reml_bhf(sample: &UnitSample) -> Result<VarComponentFit> {
    let design = BhfDesign::new(sample)?;
    let y: Vec<Vec<f64>> = sample.areas.iter().map(|a| a.y.clone()).collect();
    fit_reml_bhf_with(&design, sample, &y)
}

/// As [`fit_reml_bhf`] with responses `y` (per area) replacing those of
/// `sample`, reusing the precomputed design.
pub fn fit_reml_bhf_with(
    design: &BhfDesign,
    sample: &UnitSample,
    y: &[Vec<f64>],
) -> Result<VarComponentFit> {
    let resp = BhfResponse::new(sample, y);
    let p = design.p;
    let dof = (design.n - p) as f64;
    let psi_of = |se2: f64| -> Vec<f64> { design.sizes.iter().map(|n| se2 / *n as f64).collect() };

    let xty_total = resp.xty.iter().fold(DVector::zeros(p), |s, v| s + v);
    let yty_total: f64 = resp.yty.iter().sum();
    let beta_ols = solve_spd(&design.xtx_total, &xty_total, "unit-level design X'X")?;
    let rss = yty_total - beta_ols.dot(&xty_total);
    if rss <= EXACT_FIT_TOL.sqrt() * 1e-4 * yty_total.max(f64::MIN_POSITIVE)
        && exact_unit_fit(sample, y, &beta_ols)
    {
        return Ok(VarComponentFit {
            beta: beta_ols,
            sigma_u2: 0.0,
            sigma_e2: Some(0.0),
            psi: psi_of(0.0),
            method: FitMethod::RemlBhf,
            structure: None,
            loglik_restricted: f64::INFINITY,
            converged: true,
            iterations: 0,
            at_boundary: true,
            max_leverage: None,
            warnings: vec!["exact fit: all variance components are 0".into()],
        });
    }

    let objective = |a: f64| match gls_bhf(design, &resp, a) {
        Some((g, logdet_w)) if g.q > 0.0 => {
            -0.5 * (dof * (g.q / dof).ln() + logdet_w + g.logdet_a + dof)
        }
        _ => f64::NEG_INFINITY,
    };
    let mut grid = unit_interval_grid(100, 16);
    let last = grid.len() - 1;
    grid[last] = 1.0 - 1e-10;
    grid.retain(|a| *a <= 1.0 - 1e-10);
    let opts = ScanOptions {
        grid,
        xtol: 1e-12,
        max_iter: 500,
    };
    let m = maximize_scalar(objective, &opts);
    if !m.converged || !m.value.is_finite() {
        return Err(search_failed(&m, "nested-error restricted likelihood"));
    }
    let a = m.x;
    let (g, _) =
        gls_bhf(design, &resp, a).ok_or_else(|| SaeError::Singular("nested-error GLS".into()))?;
    let tau = g.q / dof;
    let sigma_u2 = tau * a;
    let sigma_e2 = tau * (1.0 - a);
    let mut warnings = Vec::new();
    if sigma_u2 == 0.0 {
        warnings.push("sigma_u2 estimated as 0: predictions are purely synthetic".into());
    }
    Ok(VarComponentFit {
        beta: g.beta,
        sigma_u2,
        sigma_e2: Some(sigma_e2),
        psi: psi_of(sigma_e2),
        method: FitMethod::RemlBhf,
        structure: None,
        loglik_restricted: m.value,
        converged: true,
        iterations: m.evaluations,
        at_boundary: sigma_u2 == 0.0,
        max_leverage: None,
        warnings,
    })
}

fn exact_unit_fit(sample: &UnitSample, y: &[Vec<f64>], beta: &DVector<f64>) -> bool {
    let mut rss = 0.0;
    let mut yy = 0.0;
    for (a, y) in sample.areas.iter().zip(y) {
        let fitted = &a.x * beta;
        for (f, v) in fitted.iter().zip(y) {
            rss += (v - f).powi(2);
            yy += v * v;
        }
    }
    rss <= EXACT_FIT_TOL * yy.max(f64::MIN_POSITIVE)
}

/// Restricted log-likelihood of the nested-error model at `(σu², σe²)`,
/// without the `2π` constant, evaluated from the dense per-area covariance.
pub fn bhf_restricted_loglik(sample: &UnitSample, sigma_u2: f64, sigma_e2: f64) -> Option<f64> {
    let p = sample.p();
    let mut a = DMatrix::zeros(p, p);
    let mut b = DVector::zeros(p);
    let mut logdet = 0.0;
    let mut inverses = Vec::with_capacity(sample.num_areas());
    for ar in &sample.areas {
        let n = ar.n();
        let v = DMatrix::from_fn(n, n, |i, j| sigma_u2 + if i == j { sigma_e2 } else { 0.0 });
        logdet += logdet_spd(&v)?;
        let vi = v.cholesky()?.inverse();
        let yv = DVector::from_column_slice(&ar.y);
        a += ar.x.transpose() * &vi * &ar.x;
        b += ar.x.transpose() * &vi * yv;
        inverses.push(vi);
    }
    let ch = a.clone().cholesky()?;
    let beta = ch.solve(&b);
    let mut q = 0.0;
    for (ar, vi) in sample.areas.iter().zip(&inverses) {
        let r = DVector::from_column_slice(&ar.y) - &ar.x * &beta;
        q += (r.transpose() * vi * &r)[(0, 0)];
    }
    let logdet_a = 2.0 * ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Some(-0.5 * (logdet + logdet_a + q))
}
