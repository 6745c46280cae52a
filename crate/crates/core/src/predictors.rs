//! Point predictors of area means: direct, EBLUP under the Fay–Herriot model
//! with direct (FHD) or structured (FHA) error variances, the empirical
//! unified predictors from area data (UA) and unit data (U), and the
//! pseudo-EBLUP (YR).

use std::io::Write;
use std::str::FromStr;

use nalgebra::DVector;

use crate::data::{fmt, AreaDataset, UnitSample, WeightKind};
use crate::error::{Result, SaeError};
use crate::varcomp::{pseudo_beta_unit, FitMethod, StructureSource, VarComponentFit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Estimator {
    Dir,
    Fhd,
    Fha,
    Ua,
    U,
    Yr,
}

impl Estimator {
    pub const ALL: [Estimator; 6] = [
        Estimator::Dir,
        Estimator::Fhd,
        Estimator::Fha,
        Estimator::Ua,
        Estimator::U,
        Estimator::Yr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Estimator::Dir => "DIR",
            Estimator::Fhd => "FHD",
            Estimator::Fha => "FHA",
            Estimator::Ua => "UA",
            Estimator::U => "U",
            Estimator::Yr => "YR",
        }
    }

    /// Weights whose direct estimator feeds the predictor.
    pub fn weight_kind(self, dir_kind: WeightKind) -> WeightKind {
        match self {
            Estimator::Dir | Estimator::Fhd => dir_kind,
            Estimator::Fha | Estimator::Yr => WeightKind::Base,
            Estimator::Ua | Estimator::U => WeightKind::Calibrated,
        }
    }
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Estimator {
    type Err = SaeError;

    fn from_str(s: &str) -> Result<Self> {
        Estimator::ALL
            .into_iter()
            .find(|e| e.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| SaeError::Config(format!("unknown estimator `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AreaEstimate {
    pub area_id: String,
    pub mu_hat: f64,
    pub gamma: f64,
    pub direct_part: f64,
    /// `X̄_d'β̂`; NaN for the direct estimator.
    pub synthetic_part: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateSet {
    pub estimator: Estimator,
    pub method: Option<FitMethod>,
    pub rows: Vec<AreaEstimate>,
    /// Areas without an estimate (FHD where `ψ_d0` is unavailable).
    pub excluded: Vec<String>,
}

impl EstimateSet {
    pub fn get(&self, area_id: &str) -> Option<&AreaEstimate> {
        self.rows.iter().find(|r| r.area_id == area_id)
    }

    pub fn mu_hat(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.mu_hat).collect()
    }
}

/// `σu² / (σu² + ψ)`.
pub fn gamma_shrinkage(sigma_u2: f64, psi: f64) -> Result<f64> {
    if sigma_u2 < 0.0 || psi < 0.0 {
        return Err(SaeError::Validation(format!(
            "negative variance in shrinkage factor (sigma_u2 = {sigma_u2}, psi = {psi})"
        )));
    }
    if sigma_u2 == 0.0 && psi == 0.0 {
        return Err(SaeError::DegenerateShrinkage);
    }
    Ok(sigma_u2 / (sigma_u2 + psi))
}

/// `σe² Σ w² / denom²`, with `denom = w_d·` for base weights and `N_d` for
/// calibrated weights.
pub fn structured_psi(sigma_e2: f64, weights: &[f64], denom: f64) -> f64 {
    sigma_e2 * weights.iter().map(|w| w * w).sum::<f64>() / (denom * denom)
}

fn shrink(area_id: &str, gamma: f64, direct: f64, synthetic: f64) -> AreaEstimate {
    AreaEstimate {
        area_id: area_id.to_string(),
        mu_hat: gamma * direct + (1.0 - gamma) * synthetic,
        gamma,
        direct_part: direct,
        synthetic_part: synthetic,
    }
}

pub fn direct_predictor(data: &AreaDataset) -> EstimateSet {
    EstimateSet {
        estimator: Estimator::Dir,
        method: None,
        rows: data
            .rows
            .iter()
            .map(|r| AreaEstimate {
                area_id: r.area_id.clone(),
                mu_hat: r.ybar,
                gamma: 1.0,
                direct_part: r.ybar,
                synthetic_part: f64::NAN,
            })
            .collect(),
        excluded: Vec::new(),
    }
}

/// Area-level EBLUP `γ_d ȳ_d + (1 − γ_d) X̄_d'β̂`.
///
/// FHD expects a known-ψ fit on the areas of `data` that carry `psi0`;
/// the others are reported as excluded. FHA and UA expect a structured fit
/// with base and calibrated structure respectively.
pub fn area_predictor(
    fit: &VarComponentFit,
    data: &AreaDataset,
    flavor: Estimator,
) -> Result<EstimateSet> {
    let mismatch = |what: &str| {
        SaeError::Config(format!(
            "{} predictor needs {what}, got a {} fit",
            flavor.as_str(),
            fit.method.as_str()
        ))
    };
    let (rows, excluded): (Vec<_>, Vec<_>) = match flavor {
        Estimator::Fhd => {
            if fit.method != FitMethod::RemlFh {
                return Err(mismatch("a reml-fh fit on psi0"));
            }
            data.rows.iter().partition(|r| r.psi0.is_some())
        }
        Estimator::Fha | Estimator::Ua => {
            let want = if flavor == Estimator::Fha {
                StructureSource::Base
            } else {
                StructureSource::Calibrated
            };
            if fit.method != FitMethod::RemlStructuredArea || fit.structure != Some(want) {
                return Err(mismatch(if flavor == Estimator::Fha {
                    "a structured fit with base-weight constants"
                } else {
                    "a structured fit with calibrated-weight constants"
                }));
            }
            (data.rows.iter().collect(), Vec::new())
        }
        _ => {
            return Err(SaeError::Config(format!(
                "{} is not an area-level predictor",
                flavor.as_str()
            )))
        }
    };
    if fit.psi.len() != rows.len() || fit.beta.len() != data.p() {
        return Err(SaeError::Config(format!(
            "fit covers {} areas and {} coefficients; data has {} usable areas and {} covariates",
            fit.psi.len(),
            fit.beta.len(),
            rows.len(),
            data.p()
        )));
    }
    let rows = rows
        .iter()
        .zip(&fit.psi)
        .map(|(r, psi)| {
            let g = gamma_shrinkage(fit.sigma_u2, *psi)?;
            Ok(shrink(&r.area_id, g, r.ybar, r.xbar.dot(&fit.beta)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EstimateSet {
        estimator: flavor,
        method: Some(fit.method),
        rows,
        excluded: excluded.into_iter().map(|r| r.area_id.clone()).collect(),
    })
}

/// Match `data` rows to the areas of `sample` and return `X̄_d` per area.
pub fn population_means(sample: &UnitSample, data: &AreaDataset) -> Result<Vec<DVector<f64>>> {
    sample
        .areas
        .iter()
        .map(|a| {
            let r = data
                .rows
                .iter()
                .find(|r| r.area_id == a.area_id)
                .ok_or_else(|| {
                    SaeError::Validation(format!("no population means for area `{}`", a.area_id))
                })?;
            if r.xbar.len() != a.x.ncols() {
                return Err(SaeError::Validation(format!(
                    "area `{}`: X̄ has length {}, expected {}",
                    a.area_id,
                    r.xbar.len(),
                    a.x.ncols()
                )));
            }
            Ok(r.xbar.clone())
        })
        .collect()
}

/// Unit-level predictors with plug-ins from a nested-error fit.
///
/// YR: `γ_d[ȳ_dw + (X̄_d − x̄_dw)'β̂_U] + (1 − γ_d) X̄_d'β̂_U` with base
/// weights. U: `γ^C_d ȳ^C_dw + (1 − γ^C_d) X̄_d'β̂^C_U` with calibrated
/// weights.
pub fn unit_predictor(
    fit: &VarComponentFit,
    sample: &UnitSample,
    xbar_pop: &[DVector<f64>],
    flavor: Estimator,
) -> Result<EstimateSet> {
    let kind = match flavor {
        Estimator::Yr => WeightKind::Base,
        Estimator::U => WeightKind::Calibrated,
        _ => {
            return Err(SaeError::Config(format!(
                "{} is not a unit-level predictor",
                flavor.as_str()
            )))
        }
    };
    if fit.method != FitMethod::RemlBhf {
        return Err(SaeError::Config(format!(
            "{} predictor needs a reml-bhf fit, got {}",
            flavor.as_str(),
            fit.method.as_str()
        )));
    }
    if xbar_pop.len() != sample.num_areas() {
        return Err(SaeError::Validation(
            "one X̄_d per sampled area is required".into(),
        ));
    }
    let sigma_e2 = fit.sigma_e2.unwrap_or(0.0);
    let beta = pseudo_beta_unit(fit.sigma_u2, sigma_e2, sample, kind)?;
    unit_predictor_with_beta(fit.sigma_u2, sigma_e2, &beta, sample, xbar_pop, flavor)
}

/// As [`unit_predictor`] with a given β̂.
pub fn unit_predictor_with_beta(
    sigma_u2: f64,
    sigma_e2: f64,
    beta: &DVector<f64>,
    sample: &UnitSample,
    xbar_pop: &[DVector<f64>],
    flavor: Estimator,
) -> Result<EstimateSet> {
    let rows = sample
        .areas
        .iter()
        .zip(xbar_pop)
        .map(|(a, xbar)| {
            let synthetic = xbar.dot(beta);
            let (psi, direct) = match flavor {
                Estimator::Yr => {
                    let wdot: f64 = a.w.iter().sum();
                    let ybar = a.w.iter().zip(&a.y).map(|(w, y)| w * y).sum::<f64>() / wdot;
                    let xw = a.weighted_xbar(WeightKind::Base)?;
                    (
                        structured_psi(sigma_e2, &a.w, wdot),
                        ybar + (xbar - xw).dot(beta),
                    )
                }
                _ => {
                    let w = a.weights(WeightKind::Calibrated)?;
                    let big_n = a.pop_size as f64;
                    let ybar = w.iter().zip(&a.y).map(|(w, y)| w * y).sum::<f64>() / big_n;
                    (structured_psi(sigma_e2, w, big_n), ybar)
                }
            };
            let g = gamma_shrinkage(sigma_u2, psi)?;
            Ok(shrink(&a.area_id, g, direct, synthetic))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EstimateSet {
        estimator: flavor,
        method: Some(FitMethod::RemlBhf),
        rows,
        excluded: Vec::new(),
    })
}

/// `Σ N_d μ̂_d − Σ_d Σ_i w^C y`.
pub fn benchmark_residual(est: &EstimateSet, sample: &UnitSample) -> Result<f64> {
    let mut total_hat = 0.0;
    let mut total_w = 0.0;
    for a in &sample.areas {
        let e = est
            .get(&a.area_id)
            .ok_or_else(|| SaeError::Validation(format!("no estimate for area `{}`", a.area_id)))?;
        total_hat += a.pop_size as f64 * e.mu_hat;
        let w = a.weights(WeightKind::Calibrated)?;
        total_w += w.iter().zip(&a.y).map(|(w, y)| w * y).sum::<f64>();
    }
    Ok(total_hat - total_w)
}

/// Calibrated-weight pattern behind design consistency of the unified
/// predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyReport {
    pub area_id: String,
    pub min_weight: f64,
    /// `max_i w^C_i / N_d`.
    pub max_ratio: f64,
    /// `Σ_i (w^C_i / N_d)²`.
    pub sum_sq_ratio: f64,
    pub has_nonpositive: bool,
}

pub fn consistency_diagnostic(sample: &UnitSample) -> Result<Vec<ConsistencyReport>> {
    sample
        .areas
        .iter()
        .map(|a| {
            let w = a.weights(WeightKind::Calibrated)?;
            let big_n = a.pop_size as f64;
            let min_weight = w.iter().copied().fold(f64::INFINITY, f64::min);
            Ok(ConsistencyReport {
                area_id: a.area_id.clone(),
                min_weight,
                max_ratio: w
                    .iter()
                    .map(|w| w / big_n)
                    .fold(f64::NEG_INFINITY, f64::max),
                sum_sq_ratio: w.iter().map(|w| (w / big_n).powi(2)).sum(),
                has_nonpositive: min_weight <= 0.0,
            })
        })
        .collect()
}

fn fmt_or_na(v: f64) -> String {
    if v.is_nan() {
        "NA".into()
    } else {
        fmt(v)
    }
}

/// `area_id,estimate,gamma,direct_part,synthetic_part`; excluded areas get
/// `NA` in every numeric column.
pub fn write_estimates_csv<W: Write>(writer: W, est: &EstimateSet) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record([
        "area_id",
        "estimate",
        "gamma",
        "direct_part",
        "synthetic_part",
    ])?;
    let mut all: Vec<(&str, Option<&AreaEstimate>)> = est
        .rows
        .iter()
        .map(|r| (r.area_id.as_str(), Some(r)))
        .chain(est.excluded.iter().map(|a| (a.as_str(), None)))
        .collect();
    all.sort_by(|a, b| a.0.cmp(b.0));
    for (id, r) in all {
        match r {
            Some(r) => wtr.write_record([
                id.to_string(),
                fmt(r.mu_hat),
                fmt(r.gamma),
                fmt(r.direct_part),
                fmt_or_na(r.synthetic_part),
            ])?,
            None => wtr.write_record([id, "NA", "NA", "NA", "NA"])?,
        }
    }
    wtr.flush()
        .map_err(|e| SaeError::io("<estimates csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{AreaRow, AreaUnits};
    use crate::varcomp::StructureSource;
    use nalgebra::DMatrix;

    fn fit(
        method: FitMethod,
        beta: Vec<f64>,
        su: f64,
        se: Option<f64>,
        psi: Vec<f64>,
    ) -> VarComponentFit {
        VarComponentFit {
            beta: DVector::from_vec(beta),
            sigma_u2: su,
            sigma_e2: se,
            psi,
            method,
            structure: None,
            loglik_restricted: 0.0,
            converged: true,
            iterations: 0,
            at_boundary: false,
            max_leverage: None,
            warnings: Vec::new(),
        }
    }

    fn data3() -> AreaDataset {
        let rows = (0..3)
            .map(|d| AreaRow {
                area_id: format!("a{d}"),
                pop_size: 50,
                sample_size: 5,
                ybar: [1.0, 4.0, 2.5][d],
                xbar: DVector::from_vec(vec![1.0, [0.5, 2.0, 1.0][d]]),
                w2: 500.0,
                wdot: 50.0,
                psi0: if d == 2 { None } else { Some(0.1) },
            })
            .collect();
        AreaDataset::new(rows).unwrap()
    }

    #[test]
    fn gamma_examples() {
        assert!((gamma_shrinkage(0.01, 0.03).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(gamma_shrinkage(0.5, 0.0).unwrap(), 1.0);
        assert_eq!(gamma_shrinkage(0.0, 0.5).unwrap(), 0.0);
        assert!(matches!(
            gamma_shrinkage(0.0, 0.0),
            Err(SaeError::DegenerateShrinkage)
        ));
    }

    #[test]
    fn structured_psi_examples() {
        assert!((structured_psi(0.09, &[10.0; 3], 30.0) - 0.03).abs() < 1e-15);
        assert!((structured_psi(1.0, &[2.0, 4.0], 6.0) - 20.0 / 36.0).abs() < 1e-15);
    }

    #[test]
    fn fhd_hand_case_and_exclusion() {
        let f = fit(FitMethod::RemlFh, vec![1.0, 0.5], 0.3, None, vec![0.1, 0.2]);
        let est = area_predictor(&f, &data3(), Estimator::Fhd).unwrap();
        assert_eq!(est.excluded, vec!["a2".to_string()]);
        let g0 = 0.3 / 0.4;
        assert!((est.rows[0].mu_hat - (g0 * 1.0 + (1.0 - g0) * 1.25)).abs() < 1e-14);
        let g1 = 0.3 / 0.5;
        assert!((est.rows[1].mu_hat - (g1 * 4.0 + (1.0 - g1) * 2.0)).abs() < 1e-14);
        let mut buf = Vec::new();
        write_estimates_csv(&mut buf, &est).unwrap();
        assert!(String::from_utf8(buf).unwrap().contains("a2,NA,NA,NA,NA"));
    }

    #[test]
    fn shrinkage_endpoints() {
        let mut f = fit(
            FitMethod::RemlStructuredArea,
            vec![1.0, 0.5],
            0.0,
            Some(1.0),
            vec![0.1; 3],
        );
        f.structure = Some(StructureSource::Base);
        let est = area_predictor(&f, &data3(), Estimator::Fha).unwrap();
        for (e, r) in est.rows.iter().zip(&data3().rows) {
            assert_eq!(e.mu_hat, r.xbar.dot(&f.beta));
        }
        f.sigma_u2 = 2.0;
        f.psi = vec![0.0; 3];
        let est = area_predictor(&f, &data3(), Estimator::Fha).unwrap();
        for (e, r) in est.rows.iter().zip(&data3().rows) {
            assert_eq!(e.mu_hat, r.ybar);
        }
        assert!(area_predictor(&f, &data3(), Estimator::Ua).is_err());
        assert!(area_predictor(&f, &data3(), Estimator::Fhd).is_err());
    }

    fn tiny_sample() -> (UnitSample, Vec<DVector<f64>>) {
        let mk =
            |id: &str, y: Vec<f64>, x1: Vec<f64>, w: Vec<f64>, wc: Vec<f64>, big_n| AreaUnits {
                area_id: id.into(),
                pop_size: big_n,
                x: DMatrix::from_fn(y.len(), 2, |i, j| if j == 0 { 1.0 } else { x1[i] }),
                y,
                w,
                w_cal: Some(wc),
            };
        let s = UnitSample::new(vec![
            mk(
                "a",
                vec![1.0, 2.0, 4.0],
                vec![0.2, 0.5, 0.9],
                vec![3.0, 4.0, 5.0],
                vec![2.0, 5.0, 5.0],
                12,
            ),
            mk(
                "b",
                vec![0.5, 1.5, 1.0],
                vec![0.1, 0.4, 0.3],
                vec![2.0, 2.0, 6.0],
                vec![3.0, 1.0, 6.0],
                10,
            ),
        ])
        .unwrap();
        let xbar = s
            .areas
            .iter()
            .map(|a| a.weighted_xbar(WeightKind::Calibrated).unwrap())
            .collect();
        (s, xbar)
    }

    #[test]
    fn yr_hand_case() {
        let (s, xbar) = tiny_sample();
        let f = fit(FitMethod::RemlBhf, vec![0.0, 0.0], 0.2, Some(0.5), vec![]);
        let est = unit_predictor(&f, &s, &xbar, Estimator::Yr).unwrap();
        let beta = pseudo_beta_unit(0.2, 0.5, &s, WeightKind::Base).unwrap();
        for ((a, e), xb) in s.areas.iter().zip(&est.rows).zip(&xbar) {
            let wdot: f64 = a.w.iter().sum();
            let psi = 0.5 * a.w.iter().map(|w| w * w).sum::<f64>() / (wdot * wdot);
            let g = 0.2 / (0.2 + psi);
            let ybar = (0..3).map(|i| a.w[i] * a.y[i]).sum::<f64>() / wdot;
            let xw: Vec<f64> = (0..2)
                .map(|j| (0..3).map(|i| a.w[i] * a.x[(i, j)]).sum::<f64>() / wdot)
                .collect();
            let adj: f64 = (0..2).map(|j| (xb[j] - xw[j]) * beta[j]).sum();
            let syn: f64 = (0..2).map(|j| xb[j] * beta[j]).sum();
            let expect = g * (ybar + adj) + (1.0 - g) * syn;
            assert!((e.mu_hat - expect).abs() < 1e-13);
        }
    }

    #[test]
    fn unified_equals_pseudo_bp_with_calibrated_means_and_benchmarks() {
        let (s, xbar) = tiny_sample();
        let f = fit(FitMethod::RemlBhf, vec![0.0, 0.0], 0.2, Some(0.5), vec![]);
        let u = unit_predictor(&f, &s, &xbar, Estimator::U).unwrap();
        let beta = pseudo_beta_unit(0.2, 0.5, &s, WeightKind::Calibrated).unwrap();
        for ((a, e), xb) in s.areas.iter().zip(&u.rows).zip(&xbar) {
            let w = a.w_cal.as_ref().unwrap();
            let big_n = a.pop_size as f64;
            let psi = 0.5 * w.iter().map(|w| w * w).sum::<f64>() / (big_n * big_n);
            let g = 0.2 / (0.2 + psi);
            let ybar = (0..3).map(|i| w[i] * a.y[i]).sum::<f64>() / big_n;
            let xc = a.weighted_xbar(WeightKind::Calibrated).unwrap();
            let pseudo = g * (ybar + (xb - xc).dot(&beta)) + (1.0 - g) * xb.dot(&beta);
            assert!((e.mu_hat - pseudo).abs() < 1e-12);
            assert!(
                (e.mu_hat - (e.gamma * e.direct_part + (1.0 - e.gamma) * e.synthetic_part)).abs()
                    < 1e-12
            );
        }
        let total: f64 = s
            .areas
            .iter()
            .map(|a| {
                a.w_cal
                    .as_ref()
                    .unwrap()
                    .iter()
                    .zip(&a.y)
                    .map(|(w, y)| w * y)
                    .sum::<f64>()
            })
            .sum();
        assert!(benchmark_residual(&u, &s).unwrap().abs() <= 1e-10 * total.abs());
    }

    #[test]
    fn consistency_equal_weights() {
        let (mut s, _) = tiny_sample();
        s.areas[0].w_cal = Some(vec![4.0; 3]);
        s.areas[1].w_cal = Some(vec![5.0, -1.0, 6.0]);
        let r = consistency_diagnostic(&s).unwrap();
        assert!((r[0].max_ratio - 1.0 / 3.0).abs() < 1e-15);
        assert!((r[0].sum_sq_ratio - 1.0 / 3.0).abs() < 1e-15);
        assert!(!r[0].has_nonpositive && r[1].has_nonpositive);
    }

    #[test]
    fn estimator_names_roundtrip() {
        for e in Estimator::ALL {
            assert_eq!(e.as_str().to_lowercase().parse::<Estimator>().unwrap(), e);
        }
        assert!("xyz".parse::<Estimator>().is_err());
    }
}
