//! Unit-level residuals of a nested-error fit with histogram and normal
//! Q-Q data for plotting.

use std::io::Write;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{fmt, UnitSample};
use crate::error::{Result, SaeError};
use crate::varcomp::{FitMethod, VarComponentFit};

#[derive(Debug, Clone, PartialEq)]
pub struct UnitResidual {
    pub area_id: String,
    pub y: f64,
    pub fitted: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AreaEffect {
    pub area_id: String,
    pub n_d: usize,
    pub gamma: f64,
    pub u_hat: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualReport {
    pub residuals: Vec<UnitResidual>,
    pub effects: Vec<AreaEffect>,
    pub histogram: Vec<HistogramBin>,
    /// `(theoretical, empirical)` pairs, sorted.
    pub qq: Vec<(f64, f64)>,
}

/// `⌈√n⌉`.
pub fn default_bins(n: usize) -> usize {
    ((n as f64).sqrt().ceil() as usize).max(1)
}

/// `ê_di = y_di − x_di'β̂ − û_d` with `û_d = γ̂_d (ȳ_d − x̄_d'β̂)` and
/// `γ̂_d = σ̂u² / (σ̂u² + σ̂e²/n_d)` (unweighted sample means).
pub fn residual_diagnostics(
    fit: &VarComponentFit,
    sample: &UnitSample,
    bins: Option<usize>,
) -> Result<ResidualReport> {
    if fit.method != FitMethod::RemlBhf {
        return Err(SaeError::Config(format!(
            "residual diagnostics need a reml-bhf fit, got {}",
            fit.method.as_str()
        )));
    }
    if fit.beta.len() != sample.p() {
        return Err(SaeError::Validation(
            "fit and sample have different covariates".into(),
        ));
    }
    let se2 = fit.sigma_e2.unwrap_or(0.0);
    let su2 = fit.sigma_u2;
    let mut residuals = Vec::with_capacity(sample.total_n());
    let mut effects = Vec::with_capacity(sample.num_areas());
    for a in &sample.areas {
        let n = a.n();
        if n == 0 {
            continue;
        }
        let xb: Vec<f64> = (0..n)
            .map(|i| a.x.row(i).transpose().dot(&fit.beta))
            .collect();
        let mean_resid = a.y.iter().zip(&xb).map(|(y, m)| y - m).sum::<f64>() / n as f64;
        let denom = su2 + se2 / n as f64;
        let gamma = if denom > 0.0 { su2 / denom } else { 0.0 };
        let u_hat = gamma * mean_resid;
        for (y, m) in a.y.iter().zip(&xb) {
            residuals.push(UnitResidual {
                area_id: a.area_id.clone(),
                y: *y,
                fitted: m + u_hat,
                residual: y - m - u_hat,
            });
        }
        effects.push(AreaEffect {
            area_id: a.area_id.clone(),
            n_d: n,
            gamma,
            u_hat,
        });
    }
    let values: Vec<f64> = residuals.iter().map(|r| r.residual).collect();
    let histogram = histogram(&values, bins.unwrap_or_else(|| default_bins(values.len())));
    let qq = normal_qq(&values);
    Ok(ResidualReport {
        residuals,
        effects,
        histogram,
        qq,
    })
}

/// Equal-width bins over `[min, max]`; the last bin is closed.
pub fn histogram(values: &[f64], bins: usize) -> Vec<HistogramBin> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for v in values {
        let k = if width > 0.0 {
            (((v - lo) / width) as usize).min(bins - 1)
        } else {
            0
        };
        counts[k] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(k, count)| HistogramBin {
            lower: lo + width * k as f64,
            upper: if k + 1 == bins {
                hi
            } else {
                lo + width * (k + 1) as f64
            },
            count,
        })
        .collect()
}

/// Standard normal quantiles at `(i − 0.5)/n` against the sorted values.
pub fn normal_qq(values: &[f64]) -> Vec<(f64, f64)> {
    let std_normal = Normal::standard();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, v)| (std_normal.inverse_cdf((i as f64 + 0.5) / n), v))
        .collect()
}

/// `area_id,y,fitted,residual`.
pub fn write_residuals_csv<W: Write>(writer: W, report: &ResidualReport) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["area_id", "y", "fitted", "residual"])?;
    for r in &report.residuals {
        wtr.write_record([r.area_id.clone(), fmt(r.y), fmt(r.fitted), fmt(r.residual)])?;
    }
    wtr.flush()
        .map_err(|e| SaeError::io("<residuals csv>", e))?;
    Ok(())
}

/// `theoretical,empirical`.
pub fn write_qq_csv<W: Write>(writer: W, report: &ResidualReport) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["theoretical", "empirical"])?;
    for (t, e) in &report.qq {
        wtr.write_record([fmt(*t), fmt(*e)])?;
    }
    wtr.flush().map_err(|e| SaeError::io("<qq csv>", e))?;
    Ok(())
}

/// `lower,upper,count`.
pub fn write_hist_csv<W: Write>(writer: W, report: &ResidualReport) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["lower", "upper", "count"])?;
    for b in &report.histogram {
        wtr.write_record([fmt(b.lower), fmt(b.upper), b.count.to_string()])?;
    }
    wtr.flush()
        .map_err(|e| SaeError::io("<histogram csv>", e))?;
    Ok(())
}

/// `area_id,n_d,gamma,u_hat`.
pub fn write_effects_csv<W: Write>(writer: W, report: &ResidualReport) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["area_id", "n_d", "gamma", "u_hat"])?;
    for e in &report.effects {
        wtr.write_record([
            e.area_id.clone(),
            e.n_d.to_string(),
            fmt(e.gamma),
            fmt(e.u_hat),
        ])?;
    }
    wtr.flush().map_err(|e| SaeError::io("<effects csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::AreaUnits;
    use crate::varcomp::fit_reml_bhf;
    use nalgebra::DMatrix;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn bhf_sample(sizes: &[usize], su: f64, se: f64, seed: u64) -> UnitSample {
        let mut rng = crate::rng::stream(seed, &[]);
        let areas = sizes
            .iter()
            .enumerate()
            .map(|(k, &n)| {
                let u = su * rng.sample::<f64, _>(StandardNormal);
                let x = DMatrix::from_fn(n, 2, |_, j| {
                    if j == 0 {
                        1.0
                    } else {
                        rng.random::<f64>() * 4.0
                    }
                });
                let y = (0..n)
                    .map(|i| 1.0 + 2.0 * x[(i, 1)] + u + se * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                AreaUnits {
                    area_id: format!("a{k}"),
                    pop_size: 10 * n,
                    y,
                    x,
                    w: vec![10.0; n],
                    w_cal: None,
                }
            })
            .collect();
        UnitSample::new(areas).unwrap()
    }

    #[test]
    fn noiseless_line_has_zero_residuals() {
        let s = bhf_sample(&[4, 5, 6, 3], 0.0, 0.0, 1);
        let fit = fit_reml_bhf(&s).unwrap();
        let r = residual_diagnostics(&fit, &s, None).unwrap();
        assert!(r.residuals.iter().all(|u| u.residual.abs() < 1e-10));
    }

    #[test]
    fn area_mean_identity_and_variance() {
        let sizes: Vec<usize> = (0..30).map(|k| 5 + (k % 20)).collect();
        let s = bhf_sample(&sizes, 0.5, 1.0, 3);
        let fit = fit_reml_bhf(&s).unwrap();
        let r = residual_diagnostics(&fit, &s, None).unwrap();
        assert_eq!(r.residuals.len(), s.total_n());
        for (a, e) in s.areas.iter().zip(&r.effects) {
            let n = a.n() as f64;
            let mine: f64 = r
                .residuals
                .iter()
                .filter(|u| u.area_id == a.area_id)
                .map(|u| u.residual)
                .sum::<f64>()
                / n;
            let raw: f64 = (0..a.n())
                .map(|i| a.y[i] - a.x.row(i).transpose().dot(&fit.beta))
                .sum::<f64>()
                / n;
            assert!((mine - (1.0 - e.gamma) * raw).abs() < 1e-10);
        }
        let vals: Vec<f64> = r.residuals.iter().map(|u| u.residual).collect();
        let v = crate::linalg::sample_variance(&vals);
        assert!((v / fit.sigma_e2.unwrap() - 1.0).abs() < 0.1, "{v}");
        assert_eq!(
            r.histogram.iter().map(|b| b.count).sum::<usize>(),
            vals.len()
        );
        assert_eq!(r.histogram.len(), default_bins(vals.len()));
        assert!(r.qq.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 <= w[1].1));
    }

    #[test]
    fn single_unit_area_shrinks() {
        let mut sizes = vec![8; 12];
        sizes.push(1);
        let s = bhf_sample(&sizes, 0.5, 1.0, 4);
        let fit = fit_reml_bhf(&s).unwrap();
        let r = residual_diagnostics(&fit, &s, None).unwrap();
        let last = r.effects.last().unwrap();
        assert!(last.gamma < 1.0);
    }

    #[test]
    fn qq_and_histogram_shapes() {
        let qq = normal_qq(&[3.0, 1.0, 2.0]);
        assert_eq!(
            qq.iter().map(|p| p.1).collect::<Vec<_>>(),
            vec![1.0, 2.0, 3.0]
        );
        assert!(qq[1].0.abs() < 1e-12 && (qq[0].0 + qq[2].0).abs() < 1e-12);
        let h = histogram(&[0.0, 1.0, 2.0, 3.0, 4.0], 2);
        assert_eq!(h.iter().map(|b| b.count).collect::<Vec<_>>(), vec![2, 3]);
        assert_eq!(histogram(&[5.0; 3], 4)[0].count, 3);
    }
}
