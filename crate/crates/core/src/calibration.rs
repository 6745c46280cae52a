//! Linear (chi-squared distance) calibration of per-area survey weights to
//! known area totals of the auxiliary variables.
//!
//! Minimizing `Σ (w_i − w^C_i)² / w_i` subject to `Σ w^C_i x_i = X_d` gives
//! `w^C_i = w_i (1 + x_i'λ)` with `λ = T^{-1}(X_d − Σ w_i x_i)` and
//! `T = Σ w_i x_i x_i'`.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::data::{fmt, UnitSample};
use crate::error::{Result, SaeError};
use crate::linalg::MAX_CONDITION;

/// Required constraint accuracy, relative to `1 + |X_{d,q}|`.
pub const CONSTRAINT_TOL: f64 = 1e-10;

/// Population totals `X_d` per area, in area order. The first component
/// is `N_d`.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationTargets {
    pub area_ids: Vec<String>,
    pub totals: Vec<DVector<f64>>,
}

impl CalibrationTargets {
    pub fn get(&self, area_id: &str) -> Option<&DVector<f64>> {
        self.area_ids
            .iter()
            .position(|a| a == area_id)
            .map(|i| &self.totals[i])
    }

    /// Totals aligned with the areas of `sample`, with the intercept total
    /// prepended when the file lists only the non-constant covariates.
    pub fn aligned(&self, sample: &UnitSample) -> Result<Vec<DVector<f64>>> {
        let p = sample.p();
        sample
            .areas
            .iter()
            .map(|a| {
                let t = self.get(&a.area_id).ok_or_else(|| {
                    SaeError::Validation(format!("no calibration target for area `{}`", a.area_id))
                })?;
                let t = if t.len() + 1 == p {
                    let mut v = DVector::zeros(p);
                    v[0] = a.pop_size as f64;
                    v.rows_mut(1, p - 1).copy_from(t);
                    v
                } else if t.len() == p {
                    t.clone()
                } else {
                    return Err(SaeError::Validation(format!(
                        "area `{}`: {} target totals for {p} covariates",
                        a.area_id,
                        t.len()
                    )));
                };
                let big_n = a.pop_size as f64;
                if (t[0] - big_n).abs() > 1e-9 * big_n.max(1.0) {
                    return Err(SaeError::Validation(format!(
                        "area `{}`: first target total {} must equal N_d = {}",
                        a.area_id, t[0], a.pop_size
                    )));
                }
                Ok(t)
            })
            .collect()
    }

    /// Population means `X̄_d = X_d / N_d` aligned with `sample`.
    pub fn means(&self, sample: &UnitSample) -> Result<Vec<DVector<f64>>> {
        Ok(self
            .aligned(sample)?
            .into_iter()
            .zip(&sample.areas)
            .map(|(t, a)| t / a.pop_size as f64)
            .collect())
    }
}

/// Parse `area_id,total_1,...,total_p`.
pub fn read_targets_csv<R: Read>(reader: R) -> Result<CalibrationTargets> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let c_id = headers
        .iter()
        .position(|h| h == "area_id")
        .ok_or_else(|| SaeError::MissingColumn("area_id".into()))?;
    let mut cols: Vec<(usize, usize)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| {
            h.strip_prefix("total_")
                .and_then(|k| k.parse().ok())
                .map(|k| (k, i))
        })
        .collect();
    cols.sort();
    if cols.is_empty() {
        return Err(SaeError::MissingColumn("total_1".into()));
    }
    let mut map = BTreeMap::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = k + 1;
        let v = cols
            .iter()
            .map(|&(_, c)| {
                let s = rec.get(c).unwrap_or("");
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| SaeError::Parse {
                        row,
                        msg: format!("column `{}`: non-numeric value `{s}`", &headers[c]),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        if map
            .insert(rec[c_id].to_string(), DVector::from_vec(v))
            .is_some()
        {
            return Err(SaeError::Parse {
                row,
                msg: format!("duplicate area `{}`", &rec[c_id]),
            });
        }
    }
    let (area_ids, totals) = map.into_iter().unzip();
    Ok(CalibrationTargets { area_ids, totals })
}

pub fn load_targets_csv(path: impl AsRef<Path>) -> Result<CalibrationTargets> {
    let path = path.as_ref();
    read_targets_csv(std::fs::File::open(path).map_err(|e| SaeError::io(path, e))?)
}

pub fn write_targets_csv<W: std::io::Write>(writer: W, targets: &CalibrationTargets) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let p = targets.totals.first().map(|t| t.len()).unwrap_or(0);
    let mut header = vec!["area_id".to_string()];
    header.extend((1..=p).map(|k| format!("total_{k}")));
    wtr.write_record(&header)?;
    for (id, t) in targets.area_ids.iter().zip(&targets.totals) {
        let mut rec = vec![id.clone()];
        rec.extend(t.iter().map(|v| fmt(*v)));
        wtr.write_record(&rec)?;
    }
    wtr.flush().map_err(|e| SaeError::io("<targets csv>", e))?;
    Ok(())
}

/// Calibration outcome for one area.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaCalibration {
    pub w_cal: Vec<f64>,
    pub lagrange: DVector<f64>,
    /// `max_q |Σ w^C x_q − X_q| / (1 + |X_q|)`.
    pub constraint_residual: f64,
    pub negative_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub areas: Vec<AreaCalibration>,
}

impl CalibrationResult {
    pub fn negative_count(&self) -> usize {
        self.areas.iter().map(|a| a.negative_count).sum()
    }

    pub fn max_constraint_residual(&self) -> f64 {
        self.areas
            .iter()
            .map(|a| a.constraint_residual)
            .fold(0.0, f64::max)
    }
}

fn weighted_totals(w: &[f64], x: &DMatrix<f64>) -> DVector<f64> {
    let mut s = DVector::zeros(x.ncols());
    for (i, wi) in w.iter().enumerate() {
        s += x.row(i).transpose() * *wi;
    }
    s
}

fn constraint_residual(w: &[f64], x: &DMatrix<f64>, target: &DVector<f64>) -> f64 {
    let s = weighted_totals(w, x);
    s.iter()
        .zip(target.iter())
        .map(|(a, b)| (a - b).abs() / (1.0 + b.abs()))
        .fold(0.0, f64::max)
}

/// Linear calibration of one area's weights `w` (covariates `x`, `n × p`)
/// to the totals `target`.
pub fn calibrate_linear(
    w: &[f64],
    x: &DMatrix<f64>,
    target: &DVector<f64>,
) -> Result<AreaCalibration> {
    let n = w.len();
    let p = x.ncols();
    let infeasible = |msg: String| SaeError::CalibrationInfeasible {
        area: String::new(),
        msg,
    };
    if x.nrows() != n || target.len() != p {
        return Err(infeasible(format!(
            "dimension mismatch: {n} weights, {}×{p} covariates, {} targets",
            x.nrows(),
            target.len()
        )));
    }
    if n < p {
        return Err(infeasible(format!(
            "n_d = {n} is smaller than the {p} constraints"
        )));
    }

    let mut t = DMatrix::zeros(p, p);
    for i in 0..n {
        let xi = x.row(i).transpose();
        t += &xi * xi.transpose() * w[i];
    }
    let svd = t.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 0.0) || smax / smin > MAX_CONDITION {
        return Err(infeasible(format!(
            "weighted cross-product matrix is singular or ill-conditioned (condition {:.3e})",
            if smin > 0.0 {
                smax / smin
            } else {
                f64::INFINITY
            }
        )));
    }
    let solve = |rhs: &DVector<f64>| {
        svd.solve(rhs, 0.0)
            .map_err(|e| infeasible(format!("linear solve failed: {e}")))
    };

    let apply = |lambda: &DVector<f64>| -> Vec<f64> {
        (0..n)
            .map(|i| w[i] * (1.0 + x.row(i).dot(&lambda.transpose())))
            .collect()
    };

    let mut lambda = solve(&(target - weighted_totals(w, x)))?;
    let mut w_cal = apply(&lambda);
    // a couple of refinement sweeps recover digits lost to conditioning
    for _ in 0..3 {
        if constraint_residual(&w_cal, x, target) <= CONSTRAINT_TOL * 1e-2 {
            break;
        }
        let delta = solve(&(target - weighted_totals(&w_cal, x)))?;
        lambda += delta;
        w_cal = apply(&lambda);
    }
    let residual = constraint_residual(&w_cal, x, target);
    if residual > CONSTRAINT_TOL {
        return Err(infeasible(format!(
            "constraints only met to {residual:.3e} (tolerance {CONSTRAINT_TOL:.0e})"
        )));
    }
    Ok(AreaCalibration {
        negative_count: w_cal.iter().filter(|v| **v <= 0.0).count(),
        w_cal,
        lagrange: lambda,
        constraint_residual: residual,
    })
}

/// Calibrate every area of `sample`, returning a copy carrying `w_cal`.
pub fn calibrate_sample(
    sample: &UnitSample,
    targets: &CalibrationTargets,
) -> Result<(UnitSample, CalibrationResult)> {
    let aligned = targets.aligned(sample)?;
    let mut out = sample.clone();
    let mut areas = Vec::with_capacity(sample.num_areas());
    for (a, t) in out.areas.iter_mut().zip(&aligned) {
        let cal = calibrate_linear(&a.w, &a.x, t).map_err(|e| match e {
            SaeError::CalibrationInfeasible { msg, .. } => SaeError::CalibrationInfeasible {
                area: a.area_id.clone(),
                msg,
            },
            other => other,
        })?;
        a.w_cal = Some(cal.w_cal.clone());
        areas.push(cal);
    }
    Ok((out, CalibrationResult { areas }))
}

/// GREG estimator of an area total, `Σ w^C_i y_i`.
pub fn greg_total(w_cal: &[f64], y: &[f64]) -> f64 {
    w_cal.iter().zip(y).map(|(w, y)| w * y).sum()
}
