//! MSE estimation: the Prasad–Rao second-order approximation for area-level
//! EBLUPs and parametric bootstraps for the unit-level predictors (YR, U) and
//! the area-level predictors (FHD with the Δ-corrected hybrid, UA, FHA).
//!
//! Replicate `b` draws from its own stream `rng::stream(seed, [b])`: first
//! the area effects `u*_d` in area order, then the errors (per area for the
//! area-level bootstrap, per unit in area-major order for the unit-level
//! one). Replicates run in parallel and are reduced in index order, so
//! results do not depend on the number of worker threads.

use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::data::{fmt, AreaDataset, UnitSample, WeightKind};
use crate::error::{Result, SaeError};
use crate::linalg::inverse_spd;
use crate::predictors::{area_predictor, unit_predictor, Estimator};
use crate::rng::stream;
use crate::varcomp::{
    fit_reml_bhf_with, fit_reml_fh, fit_reml_structured_area, pseudo_beta_unit, BhfDesign,
    FitMethod, StructureConstants, StructureSource, VarComponentFit,
};

pub const MIN_REPLICATES: usize = 50;
/// Largest tolerated share of failed bootstrap replicates.
pub const MAX_FAILURE_SHARE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MseMethod {
    Pr,
    Pb,
    Pb1,
    Pbt,
    Pb2,
}

impl MseMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            MseMethod::Pr => "PR",
            MseMethod::Pb => "PB",
            MseMethod::Pb1 => "PB1",
            MseMethod::Pbt => "PBT",
            MseMethod::Pb2 => "PB2",
        }
    }
}

impl FromStr for MseMethod {
    type Err = SaeError;

    fn from_str(s: &str) -> Result<Self> {
        [
            MseMethod::Pr,
            MseMethod::Pb,
            MseMethod::Pb1,
            MseMethod::Pbt,
            MseMethod::Pb2,
        ]
        .into_iter()
        .find(|m| m.as_str().eq_ignore_ascii_case(s.trim()))
        .ok_or_else(|| SaeError::Config(format!("unknown MSE method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MseRow {
    pub area_id: String,
    pub mse: f64,
    /// Prasad–Rao terms.
    pub g: Option<[f64; 3]>,
    /// Monte Carlo standard error of a bootstrap estimate.
    pub se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MseReport {
    pub method: MseMethod,
    pub target: Estimator,
    pub rows: Vec<MseRow>,
    /// Replicates requested.
    pub b: Option<usize>,
    pub seed: Option<u64>,
    /// Replicates dropped after a failed refit.
    pub failed: usize,
    /// σ̂u² was zero.
    pub boundary: bool,
}

impl MseReport {
    pub fn mse(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.mse).collect()
    }
}

/// Prasad–Rao estimator `g1 + g2 + 2 g3` at σ̂u² of `fit`, for the areas of
/// `data` (aligned with `psi`).
pub fn mse_prasad_rao(
    fit: &VarComponentFit,
    psi: &[f64],
    data: &AreaDataset,
    target: Estimator,
) -> Result<MseReport> {
    if psi.len() != data.num_areas() {
        return Err(SaeError::Validation(format!(
            "{} error variances for {} areas",
            psi.len(),
            data.num_areas()
        )));
    }
    let s = fit.sigma_u2;
    let v: Vec<f64> = psi.iter().map(|p| s + p).collect();
    if v.iter().any(|v| !(*v > 0.0)) {
        return Err(SaeError::DegenerateShrinkage);
    }
    let p = data.p();
    let mut a = DMatrix::zeros(p, p);
    for (r, v) in data.rows.iter().zip(&v) {
        a += &r.xbar * r.xbar.transpose() / *v;
    }
    let a_inv = inverse_spd(&a, "Prasad–Rao information matrix")?;
    let vbar = 2.0 / v.iter().map(|v| v.powi(-2)).sum::<f64>();
    let rows = data
        .rows
        .iter()
        .zip(psi.iter().zip(&v))
        .map(|(r, (psi, v))| {
            let gamma = s / v;
            let g1 = gamma * psi;
            let g2 = (1.0 - gamma).powi(2) * (r.xbar.transpose() * &a_inv * &r.xbar)[(0, 0)];
            let g3 = (1.0 - gamma).powi(2) * vbar / v;
            MseRow {
                area_id: r.area_id.clone(),
                mse: g1 + g2 + 2.0 * g3,
                g: Some([g1, g2, g3]),
                se: None,
            }
        })
        .collect();
    Ok(MseReport {
        method: MseMethod::Pr,
        target,
        rows,
        b: None,
        seed: None,
        failed: 0,
        boundary: s == 0.0,
    })
}

fn check_replicates(b: usize) -> Result<()> {
    if b < MIN_REPLICATES {
        return Err(SaeError::Config(format!(
            "bootstrap needs at least {MIN_REPLICATES} replicates, got {b}"
        )));
    }
    Ok(())
}

/// Average the per-replicate squared errors, dropping failed replicates.
/// Returns per-area (mean, MC standard error) and the failure count.
fn reduce(results: &[Option<Vec<f64>>], d: usize) -> Result<(Vec<(f64, f64)>, usize)> {
    let total = results.len();
    let failed = results.iter().filter(|r| r.is_none()).count();
    if failed as f64 > MAX_FAILURE_SHARE * total as f64 {
        return Err(SaeError::TooManyFailures { failed, total });
    }
    let ok = (total - failed) as f64;
    let mut sum = vec![0.0; d];
    let mut sum2 = vec![0.0; d];
    for r in results.iter().flatten() {
        for (k, e) in r.iter().enumerate() {
            sum[k] += e;
            sum2[k] += e * e;
        }
    }
    let out = sum
        .iter()
        .zip(&sum2)
        .map(|(s, s2)| {
            let m = s / ok;
            let var = if ok > 1.0 {
                ((s2 - ok * m * m) / (ok - 1.0)).max(0.0)
            } else {
                0.0
            };
            (m, (var / ok).sqrt())
        })
        .collect();
    Ok((out, failed))
}

fn bootstrap_report(
    method: MseMethod,
    target: Estimator,
    ids: &[String],
    stats: &[(f64, f64)],
    b: usize,
    seed: u64,
    failed: usize,
    boundary: bool,
) -> MseReport {
    MseReport {
        method,
        target,
        rows: ids
            .iter()
            .zip(stats)
            .map(|(id, (m, se))| MseRow {
                area_id: id.clone(),
                mse: *m,
                g: None,
                se: Some(*se),
            })
            .collect(),
        b: Some(b),
        seed: Some(seed),
        failed,
        boundary,
    }
}

/// Parametric bootstrap under the nested-error model for the YR or U
/// predictor.
///
/// Bootstrap populations are generated from `(β̂, σ̂u², σ̂e²)` where β̂ is
/// the pseudo-weighted estimator that the predictor itself uses.
pub fn bootstrap_mse_unit(
    fit: &VarComponentFit,
    sample: &UnitSample,
    xbar_pop: &[DVector<f64>],
    flavor: Estimator,
    b: usize,
    seed: u64,
) -> Result<MseReport> {
    check_replicates(b)?;
    let kind = match flavor {
        Estimator::Yr => WeightKind::Base,
        Estimator::U => WeightKind::Calibrated,
        _ => {
            return Err(SaeError::Config(format!(
                "{flavor} has no unit-level bootstrap"
            )))
        }
    };
    if fit.method != FitMethod::RemlBhf {
        return Err(SaeError::Config(
            "unit-level bootstrap needs a reml-bhf fit".into(),
        ));
    }
    if xbar_pop.len() != sample.num_areas() {
        return Err(SaeError::Validation(
            "one X̄_d per sampled area is required".into(),
        ));
    }
    let ids: Vec<String> = sample.areas.iter().map(|a| a.area_id.clone()).collect();
    let d = ids.len();
    let su2 = fit.sigma_u2;
    let se2 = fit.sigma_e2.unwrap_or(0.0);
    if su2 == 0.0 && se2 == 0.0 {
        let zeros = vec![(0.0, 0.0); d];
        return Ok(bootstrap_report(
            MseMethod::Pb,
            flavor,
            &ids,
            &zeros,
            b,
            seed,
            0,
            true,
        ));
    }
    let beta = pseudo_beta_unit(su2, se2, sample, kind)?;
    let design = BhfDesign::new(sample)?;
    let (su, se) = (su2.sqrt(), se2.sqrt());
    let means: Vec<DVector<f64>> = sample.areas.iter().map(|a| &a.x * &beta).collect();

    let replicate = |rep: usize| -> Option<Vec<f64>> {
        let mut rng = stream(seed, &[rep as u64]);
        let u: Vec<f64> = (0..d)
            .map(|_| su * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let y: Vec<Vec<f64>> = means
            .iter()
            .zip(&u)
            .map(|(m, u)| {
                m.iter()
                    .map(|m| m + u + se * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let refit = fit_reml_bhf_with(&design, sample, &y).ok()?;
        let boot = sample.with_responses(y);
        let est = unit_predictor(&refit, &boot, xbar_pop, flavor).ok()?;
        Some(
            est.rows
                .iter()
                .zip(xbar_pop.iter().zip(&u))
                .map(|(e, (xb, u))| (e.mu_hat - (xb.dot(&beta) + u)).powi(2))
                .collect(),
        )
    };
    let results: Vec<Option<Vec<f64>>> = (0..b).into_par_iter().map(replicate).collect();
    let (stats, failed) = reduce(&results, d)?;
    Ok(bootstrap_report(
        MseMethod::Pb,
        flavor,
        &ids,
        &stats,
        b,
        seed,
        failed,
        su2 == 0.0,
    ))
}

/// Target of the area-level bootstrap.
#[derive(Debug, Clone, PartialEq)]
pub enum AreaTarget {
    /// FH EBLUP with direct variances `psi0` held fixed across replicates.
    Fhd,
    /// EBLUP with the structured variances re-estimated per replicate (UA
    /// with calibrated constants, FHA with base constants).
    Structured(StructureConstants),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AreaBootstrap {
    pub pb1: MseReport,
    /// Only for the FHD target.
    pub pbt: Option<MseReport>,
    pub pb2: Option<MseReport>,
}

/// Parametric bootstrap under the area-level model with generating values
/// `(β̂, σ̂u², ψ̂)` taken from `gen` (its `psi` is used as ψ̂).
///
/// For [`AreaTarget::Fhd`], each replicate is refitted twice: with the
/// original `psi0` (PB1) and with ψ̂ (PBT); PB2 adds `max(0, PB1 − PBT)` to
/// the Prasad–Rao estimate computed once on the original data.
pub fn bootstrap_mse_area(
    gen: &VarComponentFit,
    data: &AreaDataset,
    target: &AreaTarget,
    b: usize,
    seed: u64,
) -> Result<AreaBootstrap> {
    check_replicates(b)?;
    let d = data.num_areas();
    if gen.psi.len() != d || gen.beta.len() != data.p() {
        return Err(SaeError::Validation(
            "generating fit does not match the area data".into(),
        ));
    }
    let ids: Vec<String> = data.rows.iter().map(|r| r.area_id.clone()).collect();
    let psi_hat = gen.psi.clone();
    let psi0 = match target {
        AreaTarget::Fhd => Some(data.psi0().ok_or_else(|| {
            SaeError::Validation("FHD bootstrap needs psi0 in every area".into())
        })?),
        AreaTarget::Structured(c) => {
            if c.c.len() != d {
                return Err(SaeError::Validation(
                    "one structure constant per area is required".into(),
                ));
            }
            None
        }
    };
    let flavor = match target {
        AreaTarget::Fhd => Estimator::Fhd,
        AreaTarget::Structured(c) if c.source == StructureSource::Calibrated => Estimator::Ua,
        AreaTarget::Structured(_) => Estimator::Fha,
    };
    let su2 = gen.sigma_u2;
    let degenerate = su2 == 0.0 && psi_hat.iter().all(|p| *p == 0.0);
    let synth: Vec<f64> = data.rows.iter().map(|r| r.xbar.dot(&gen.beta)).collect();
    let su = su2.sqrt();
    let sd_e: Vec<f64> = psi_hat.iter().map(|p| p.sqrt()).collect();

    // (errors under the target path, errors under the known-ψ̂ path)
    let replicate = |rep: usize| -> Option<(Vec<f64>, Option<Vec<f64>>)> {
        if degenerate {
            return Some((vec![0.0; d], psi0.as_ref().map(|_| vec![0.0; d])));
        }
        let mut rng = stream(seed, &[rep as u64]);
        let mu: Vec<f64> = synth
            .iter()
            .map(|m| m + su * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let ybar: Vec<f64> = mu
            .iter()
            .zip(&sd_e)
            .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let boot = data.with_ybar(&ybar);
        let sq = |est: Vec<f64>| -> Vec<f64> {
            est.iter().zip(&mu).map(|(e, m)| (e - m).powi(2)).collect()
        };
        match target {
            AreaTarget::Fhd => {
                let p0 = psi0.as_ref()?;
                let f1 = fit_reml_fh(&boot, p0).ok()?;
                let e1 = area_predictor(&f1, &boot, Estimator::Fhd).ok()?;
                let ft = fit_reml_fh(&boot, &psi_hat).ok()?;
                let mut known = boot.clone();
                for (r, p) in known.rows.iter_mut().zip(&psi_hat) {
                    r.psi0 = Some(*p);
                }
                let et = area_predictor(&ft, &known, Estimator::Fhd).ok()?;
                Some((sq(e1.mu_hat()), Some(sq(et.mu_hat()))))
            }
            AreaTarget::Structured(c) => {
                let f = fit_reml_structured_area(&boot, c).ok()?;
                let e = area_predictor(&f, &boot, flavor).ok()?;
                Some((sq(e.mu_hat()), None))
            }
        }
    };
    let results: Vec<_> = (0..b).into_par_iter().map(replicate).collect();
    let main: Vec<Option<Vec<f64>>> = results
        .iter()
        .map(|r| r.as_ref().map(|r| r.0.clone()))
        .collect();
    let (s1, failed) = reduce(&main, d)?;
    let boundary = su2 == 0.0;
    let pb1 = bootstrap_report(MseMethod::Pb1, flavor, &ids, &s1, b, seed, failed, boundary);
    if let AreaTarget::Structured(_) = target {
        return Ok(AreaBootstrap {
            pb1,
            pbt: None,
            pb2: None,
        });
    }

    let known: Vec<Option<Vec<f64>>> = results
        .iter()
        .map(|r| r.as_ref().and_then(|r| r.1.clone()))
        .collect();
    let (st, _) = reduce(&known, d)?;
    let pbt = bootstrap_report(MseMethod::Pbt, flavor, &ids, &st, b, seed, failed, boundary);
    let p0 = psi0.expect("FHD target has psi0");
    let original = fit_reml_fh(data, &p0)?;
    let pr = mse_prasad_rao(&original, &p0, data, Estimator::Fhd)?;
    let rows = pr
        .rows
        .iter()
        .zip(s1.iter().zip(&st))
        .map(|(r, ((m1, _), (mt, _)))| MseRow {
            area_id: r.area_id.clone(),
            mse: r.mse + (m1 - mt).max(0.0),
            g: None,
            se: None,
        })
        .collect();
    let pb2 = MseReport {
        method: MseMethod::Pb2,
        target: flavor,
        rows,
        b: Some(b),
        seed: Some(seed),
        failed,
        boundary: boundary || pr.boundary,
    };
    Ok(AreaBootstrap {
        pb1,
        pbt: Some(pbt),
        pb2: Some(pb2),
    })
}

/// `area_id,method,mse[,g1,g2,g3]`; the g columns appear when any report
/// carries them.
pub fn write_mse_csv<W: Write>(writer: W, reports: &[MseReport]) -> Result<()> {
    let with_g = reports
        .iter()
        .any(|r| r.rows.iter().any(|row| row.g.is_some()));
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["area_id", "method", "mse"];
    if with_g {
        header.extend(["g1", "g2", "g3"]);
    }
    wtr.write_record(&header)?;
    for rep in reports {
        for row in &rep.rows {
            let mut rec = vec![
                row.area_id.clone(),
                rep.method.as_str().to_string(),
                fmt(row.mse),
            ];
            if with_g {
                match row.g {
                    Some(g) => rec.extend(g.iter().map(|v| fmt(*v))),
                    None => rec.extend(["".to_string(), "".to_string(), "".to_string()]),
                }
            }
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush().map_err(|e| SaeError::io("<mse csv>", e))?;
    Ok(())
}
