//! Monte Carlo harness: a fixed finite population with Gamma covariates,
//! one SRSWOR sample held fixed across replicates, fresh responses from the
//! nested-error model in every replicate, and RB / RRMSE / MSE summaries of
//! the requested predictors and MSE estimators.
//!
//! Random streams: population covariates `(seed, [0, 0])`, the sample
//! `(seed, [0, 1])`, the responses of replicate ℓ of the reference run
//! `(seed, [1, ℓ])` and of the main run `(seed, [2, ℓ])`, and the bootstrap
//! master seed of main replicate ℓ `derive_seed(seed, [3, ℓ])`.
//!
//! The FHD bootstrap generates from the unit-level REML fit with
//! ψ̂_d = σ̂e² c_d; the UA and FHA bootstraps generate from their own
//! area-level fits.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;

use crate::calibration::{calibrate_sample, CalibrationTargets};
use crate::data::{
    aggregate, fmt, AreaUnits, PopulationArea, PopulationFrame, UnitSample, WeightKind,
};
use crate::direct::{attach_psi0, DesignKind};
use crate::error::{Result, SaeError};
use crate::mse::{bootstrap_mse_area, bootstrap_mse_unit, mse_prasad_rao, AreaTarget, MseMethod};
use crate::predictors::{area_predictor, direct_predictor, unit_predictor, Estimator};
use crate::rng::{derive_seed, stream};
use crate::varcomp::{
    fit_reml_bhf, fit_reml_fh, fit_reml_structured_area, StructureConstants, StructureSource,
};

const PAPER_TABLE1: &str = include_str!("../../../configs/paper_table1.cfg");
const BASE_WEIGHT_SCENARIO: &str = include_str!("../../../configs/paper_appendixC.cfg");
const PAPER_MSE: &str = include_str!("../../../configs/paper_mse.cfg");

/// Bundled scenario files, resolvable by name.
pub const BUILTIN_CONFIGS: [(&str, &str); 3] = [
    ("paper_table1.cfg", PAPER_TABLE1),
    ("paper_appendixC.cfg", BASE_WEIGHT_SCENARIO),
    ("paper_mse.cfg", PAPER_MSE),
];

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub d: usize,
    /// `N_d` per area.
    pub pop_sizes: Vec<usize>,
    /// `n_d` per area.
    pub sample_sizes: Vec<usize>,
    /// Intercept first.
    pub beta: Vec<f64>,
    pub sigma_u2: f64,
    pub sigma_e2: f64,
    /// Covariate `q` of area `d` (1-based) is Gamma(`base_q + slope_q d / D`, 1).
    pub shape_base: Vec<f64>,
    pub shape_slope: Vec<f64>,
    pub l: usize,
    /// Replicates of the reference run for the true MSE; 0 reuses the main run.
    pub l_true: usize,
    pub b: usize,
    pub estimators: Vec<Estimator>,
    pub mse_methods: Vec<(Estimator, MseMethod)>,
    pub seed: u64,
    /// Weights of the direct estimator and of FHD.
    pub weights: WeightKind,
    pub direct_design: DesignKind,
}

impl Default for SimConfig {
    fn default() -> Self {
        let n: Vec<usize> = [3, 5, 10, 15, 50].iter().flat_map(|n| [*n; 5]).collect();
        SimConfig {
            d: 25,
            pop_sizes: vec![10_000; 25],
            sample_sizes: n,
            beta: vec![4.0, 0.5, -0.4],
            sigma_u2: 0.01,
            sigma_e2: 0.09,
            shape_base: vec![5.0, 2.0],
            shape_slope: vec![3.0, 0.0],
            l: 200,
            l_true: 0,
            b: 500,
            estimators: vec![Estimator::Dir, Estimator::Fhd, Estimator::Ua, Estimator::U],
            mse_methods: Vec::new(),
            seed: 1,
            weights: WeightKind::Calibrated,
            direct_design: DesignKind::General,
        }
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<T>()
                .map_err(|_| SaeError::Config(format!("`{key}`: cannot parse `{s}`")))
        })
        .collect()
}

fn parse_one<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse::<T>()
        .map_err(|_| SaeError::Config(format!("`{key}`: cannot parse `{}`", v.trim())))
}

impl SimConfig {
    /// Parse `key = value` lines; `#` starts a comment, lists are
    /// comma-separated.
    pub fn parse(text: &str) -> Result<SimConfig> {
        let mut c = SimConfig::default();
        let mut n_repeat = 1usize;
        let mut n_values: Option<Vec<usize>> = None;
        let mut pop: Option<Vec<usize>> = None;
        let mut d: Option<usize> = None;
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| SaeError::Config(format!("line {}: expected key = value", k + 1)))?;
            let key = key.trim();
            match key {
                "D" => d = Some(parse_one(key, value)?),
                "N" => pop = Some(parse_list(key, value)?),
                "n" => n_values = Some(parse_list(key, value)?),
                "n_repeat" => n_repeat = parse_one(key, value)?,
                "beta" => c.beta = parse_list(key, value)?,
                "sigma_u2" => c.sigma_u2 = parse_one(key, value)?,
                "sigma_e2" => c.sigma_e2 = parse_one(key, value)?,
                "shape_base" => c.shape_base = parse_list(key, value)?,
                "shape_slope" => c.shape_slope = parse_list(key, value)?,
                "L" => c.l = parse_one(key, value)?,
                "L_true" => c.l_true = parse_one(key, value)?,
                "B" => c.b = parse_one(key, value)?,
                "seed" => c.seed = parse_one(key, value)?,
                "estimators" => c.estimators = parse_list(key, value)?,
                "mse_methods" => {
                    c.mse_methods = value
                        .split(',')
                        .map(|s| s.trim())
                        .filter(|s| !s.is_empty())
                        .map(|s| {
                            let (e, m) = s.split_once(':').ok_or_else(|| {
                                SaeError::Config(format!(
                                    "`mse_methods`: expected estimator:method, got `{s}`"
                                ))
                            })?;
                            Ok((e.parse()?, m.parse()?))
                        })
                        .collect::<Result<_>>()?
                }
                "weights" => {
                    c.weights = match value.trim() {
                        "calibrated" => WeightKind::Calibrated,
                        "base" => WeightKind::Base,
                        other => {
                            return Err(SaeError::Config(format!(
                                "`weights`: unknown kind `{other}`"
                            )))
                        }
                    }
                }
                "direct_variance" => c.direct_design = value.parse()?,
                other => return Err(SaeError::Config(format!("unknown key `{other}`"))),
            }
        }
        if let Some(nv) = n_values {
            c.sample_sizes = nv
                .iter()
                .flat_map(|n| std::iter::repeat(*n).take(n_repeat))
                .collect();
        }
        c.d = d.unwrap_or(c.sample_sizes.len());
        c.pop_sizes = match pop {
            Some(p) if p.len() == 1 => vec![p[0]; c.d],
            Some(p) => p,
            None => vec![c.pop_sizes[0]; c.d],
        };
        c.validate()?;
        Ok(c)
    }

    /// A bundled scenario by file name, or a config file on disk.
    pub fn load(name_or_path: &str) -> Result<SimConfig> {
        let base = Path::new(name_or_path)
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or(name_or_path);
        if !Path::new(name_or_path).exists() {
            if let Some((_, text)) = BUILTIN_CONFIGS
                .iter()
                .find(|(n, _)| *n == base || n.trim_end_matches(".cfg") == base)
            {
                return SimConfig::parse(text);
            }
        }
        let text =
            std::fs::read_to_string(name_or_path).map_err(|e| SaeError::io(name_or_path, e))?;
        SimConfig::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SaeError::Config(m));
        if self.d < 3 {
            return bad(format!("D = {} is too small", self.d));
        }
        if self.sample_sizes.len() != self.d || self.pop_sizes.len() != self.d {
            return bad(format!(
                "D = {} but {} sample sizes and {} population sizes",
                self.d,
                self.sample_sizes.len(),
                self.pop_sizes.len()
            ));
        }
        if let Some(k) = (0..self.d)
            .find(|&k| self.sample_sizes[k] == 0 || self.sample_sizes[k] > self.pop_sizes[k])
        {
            return bad(format!("area {}: need 1 <= n_d <= N_d", k + 1));
        }
        let q = self.beta.len().saturating_sub(1);
        if self.shape_base.len() != q || self.shape_slope.len() != q {
            return bad(format!(
                "beta has {q} slopes but {} shape schedules",
                self.shape_base.len()
            ));
        }
        if self
            .shape_base
            .iter()
            .zip(&self.shape_slope)
            .any(|(b, s)| !(b + s / self.d as f64 > 0.0) || !(*b > 0.0))
        {
            return bad("Gamma shapes must be positive".into());
        }
        if !(self.sigma_u2 >= 0.0) || !(self.sigma_e2 >= 0.0) {
            return bad("variance components must be non-negative".into());
        }
        if self.l == 0 {
            return bad("L must be at least 1".into());
        }
        if self.estimators.is_empty() {
            return bad("no estimators requested".into());
        }
        for (e, m) in &self.mse_methods {
            let ok = matches!(
                (e, m),
                (Estimator::U | Estimator::Yr, MseMethod::Pb)
                    | (
                        Estimator::Fhd,
                        MseMethod::Pr | MseMethod::Pb1 | MseMethod::Pbt | MseMethod::Pb2
                    )
                    | (
                        Estimator::Ua | Estimator::Fha,
                        MseMethod::Pr | MseMethod::Pb1
                    )
            );
            if !ok {
                return bad(format!(
                    "MSE method {} is not available for {}",
                    m.as_str(),
                    e.as_str()
                ));
            }
            if *m != MseMethod::Pr && self.b < crate::mse::MIN_REPLICATES {
                return bad(format!("B = {} is below the bootstrap minimum", self.b));
            }
        }
        Ok(())
    }

    pub fn area_ids(&self) -> Vec<String> {
        let width = self.d.to_string().len().max(2);
        (1..=self.d).map(|k| format!("d{k:0width$}")).collect()
    }
}

/// Covariates for every population unit (intercept first) and one draw of
/// responses.
pub fn generate_population(config: &SimConfig, seed: u64) -> Result<PopulationFrame> {
    config.validate()?;
    let mut frame = generate_covariates(config, seed)?;
    let mut rng = stream(seed, &[0, 2]);
    let beta = DVector::from_column_slice(&config.beta);
    for a in &mut frame.areas {
        let u = config.sigma_u2.sqrt() * rng.sample::<f64, _>(StandardNormal);
        let se = config.sigma_e2.sqrt();
        let mean = &a.x * &beta;
        a.y = Some(
            mean.iter()
                .map(|m| m + u + se * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        );
    }
    Ok(frame)
}

fn generate_covariates(config: &SimConfig, seed: u64) -> Result<PopulationFrame> {
    let mut rng = stream(seed, &[0, 0]);
    let q = config.beta.len() - 1;
    let ids = config.area_ids();
    let mut areas = Vec::with_capacity(config.d);
    for (k, id) in ids.into_iter().enumerate() {
        let nd = config.pop_sizes[k];
        let dists = (0..q)
            .map(|j| {
                let shape =
                    config.shape_base[j] + config.shape_slope[j] * (k + 1) as f64 / config.d as f64;
                Gamma::new(shape, 1.0)
                    .map_err(|e| SaeError::Config(format!("Gamma shape {shape}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut x = DMatrix::from_element(nd, q + 1, 1.0);
        for i in 0..nd {
            for (j, g) in dists.iter().enumerate() {
                x[(i, j + 1)] = g.sample(&mut rng);
            }
        }
        areas.push(PopulationArea {
            area_id: id,
            x,
            y: None,
        });
    }
    Ok(PopulationFrame { areas })
}

/// SRSWOR within each area with base weights `N_d / n_d`. Responses are
/// copied from the frame when present, zero otherwise.
pub fn draw_srswor(frame: &PopulationFrame, sizes: &[usize], seed: u64) -> Result<UnitSample> {
    Ok(draw_srswor_indexed(frame, sizes, seed)?.0)
}

fn draw_srswor_indexed(
    frame: &PopulationFrame,
    sizes: &[usize],
    seed: u64,
) -> Result<(UnitSample, Vec<Vec<usize>>)> {
    if sizes.len() != frame.areas.len() {
        return Err(SaeError::Validation(format!(
            "{} sample sizes for {} areas",
            sizes.len(),
            frame.areas.len()
        )));
    }
    let mut rng = stream(seed, &[0, 1]);
    let mut areas = Vec::with_capacity(sizes.len());
    let mut index = Vec::with_capacity(sizes.len());
    for (a, &n) in frame.areas.iter().zip(sizes) {
        let big_n = a.size();
        if n == 0 || n > big_n {
            return Err(SaeError::Validation(format!(
                "area `{}`: sample size {n} not in 1..={big_n}",
                a.area_id
            )));
        }
        let mut idx = rand::seq::index::sample(&mut rng, big_n, n).into_vec();
        idx.sort_unstable();
        let x = DMatrix::from_fn(n, a.x.ncols(), |i, j| a.x[(idx[i], j)]);
        let y = match &a.y {
            Some(y) => idx.iter().map(|&i| y[i]).collect(),
            None => vec![0.0; n],
        };
        areas.push(AreaUnits {
            area_id: a.area_id.clone(),
            pop_size: big_n,
            y,
            x,
            w: vec![big_n as f64 / n as f64; n],
            w_cal: None,
        });
        index.push(idx);
    }
    Ok((UnitSample::new(areas)?, index))
}

/// Relative bias, relative root MSE and MSE of one area.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub rb: f64,
    pub rrmse: f64,
    pub mse: f64,
}

/// Per-area metrics from `estimates[ℓ][d]` and `truths[ℓ][d]`.
pub fn compute_metrics(estimates: &[Vec<f64>], truths: &[Vec<f64>]) -> Result<Vec<Metrics>> {
    if estimates.is_empty() || estimates.len() != truths.len() {
        return Err(SaeError::Validation(format!(
            "{} estimate replicates for {} truth replicates",
            estimates.len(),
            truths.len()
        )));
    }
    let l = estimates.len() as f64;
    let d = truths[0].len();
    (0..d)
        .map(|k| {
            let mean_mu = truths.iter().map(|t| t[k]).sum::<f64>() / l;
            if mean_mu == 0.0 {
                return Err(SaeError::Undefined(format!(
                    "relative metrics undefined: mean true value of area {} is 0",
                    k + 1
                )));
            }
            let bias = estimates
                .iter()
                .zip(truths)
                .map(|(e, t)| e[k] - t[k])
                .sum::<f64>()
                / l;
            let mse = estimates
                .iter()
                .zip(truths)
                .map(|(e, t)| (e[k] - t[k]).powi(2))
                .sum::<f64>()
                / l;
            Ok(Metrics {
                rb: bias / mean_mu,
                rrmse: mse.sqrt() / mean_mu,
                mse,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AreaMetric {
    pub area_id: String,
    pub n_d: usize,
    pub estimator: Estimator,
    pub metrics: Metrics,
}

/// Averages over areas sharing a sample size.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupMetric {
    pub n_d: usize,
    pub estimator: Estimator,
    /// Mean of `|RB|`.
    pub arb: f64,
    pub rrmse: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MseEval {
    pub area_id: String,
    pub n_d: usize,
    pub estimator: Estimator,
    pub method: MseMethod,
    /// Monte Carlo mean of the MSE estimates and its standard error.
    pub mean_mse: f64,
    pub se: f64,
    /// Empirical MSE of the predictor and its standard error.
    pub true_mse: f64,
    pub true_se: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub config: SimConfig,
    pub per_area: Vec<AreaMetric>,
    pub groups: Vec<GroupMetric>,
    pub mse_eval: Vec<MseEval>,
    /// Replicates in which an estimator could not be computed.
    pub failures: BTreeMap<Estimator, usize>,
    /// Replicates with a failed MSE estimate.
    pub mse_failures: BTreeMap<(Estimator, MseMethod), usize>,
}

impl SimResult {
    pub fn group(&self, estimator: Estimator, n_d: usize) -> Option<&GroupMetric> {
        self.groups
            .iter()
            .find(|g| g.estimator == estimator && g.n_d == n_d)
    }

    pub fn area(&self, estimator: Estimator, area_id: &str) -> Option<&AreaMetric> {
        self.per_area
            .iter()
            .find(|a| a.estimator == estimator && a.area_id == area_id)
    }

    pub fn mse_group(
        &self,
        estimator: Estimator,
        method: MseMethod,
        n_d: usize,
    ) -> Option<(f64, f64, f64, f64)> {
        let rows: Vec<&MseEval> = self
            .mse_eval
            .iter()
            .filter(|m| m.estimator == estimator && m.method == method && m.n_d == n_d)
            .collect();
        if rows.is_empty() {
            return None;
        }
        let k = rows.len() as f64;
        let mean = rows.iter().map(|r| r.mean_mse).sum::<f64>() / k;
        let se = rows.iter().map(|r| r.se * r.se).sum::<f64>().sqrt() / k;
        let truth = rows.iter().map(|r| r.true_mse).sum::<f64>() / k;
        let tse = rows
            .iter()
            .map(|r| r.true_se * r.true_se)
            .sum::<f64>()
            .sqrt()
            / k;
        Some((mean, se, truth, tse))
    }
}

/// Everything that stays fixed across replicates.
struct Fixture {
    sample: UnitSample,
    index: Vec<Vec<usize>>,
    /// `X̄_d`.
    xbar: Vec<DVector<f64>>,
    /// `x_i'β` for every population unit.
    unit_xb: Vec<Vec<f64>>,
}

impl Fixture {
    fn new(config: &SimConfig) -> Result<Fixture> {
        let frame = generate_covariates(config, config.seed)?;
        let (sample, index) = draw_srswor_indexed(&frame, &config.sample_sizes, config.seed)?;
        let targets = CalibrationTargets {
            area_ids: frame.areas.iter().map(|a| a.area_id.clone()).collect(),
            totals: frame.areas.iter().map(|a| a.totals()).collect(),
        };
        let needs_cal = config.weights == WeightKind::Calibrated
            || config
                .estimators
                .iter()
                .any(|e| matches!(e, Estimator::U | Estimator::Ua));
        let sample = if needs_cal {
            calibrate_sample(&sample, &targets)?.0
        } else {
            sample
        };
        let beta = DVector::from_column_slice(&config.beta);
        let unit_xb: Vec<Vec<f64>> = frame
            .areas
            .iter()
            .map(|a| (&a.x * &beta).iter().copied().collect())
            .collect();
        Ok(Fixture {
            xbar: frame.areas.iter().map(|a| a.means()).collect(),
            sample,
            index,
            unit_xb,
        })
    }

    /// Sample responses and true means for one replicate.
    fn replicate(&self, config: &SimConfig, rng: &mut impl Rng) -> (Vec<Vec<f64>>, Vec<f64>) {
        let su = config.sigma_u2.sqrt();
        let se = config.sigma_e2.sqrt();
        let u: Vec<f64> = (0..config.d)
            .map(|_| su * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut ys = Vec::with_capacity(config.d);
        let mut mu = Vec::with_capacity(config.d);
        for (k, xb) in self.unit_xb.iter().enumerate() {
            let idx = &self.index[k];
            let mut y_s = Vec::with_capacity(idx.len());
            let mut next = 0;
            let mut total = 0.0;
            for (i, m) in xb.iter().enumerate() {
                let y = m + u[k] + se * rng.sample::<f64, _>(StandardNormal);
                total += y;
                if next < idx.len() && idx[next] == i {
                    y_s.push(y);
                    next += 1;
                }
            }
            ys.push(y_s);
            mu.push(total / xb.len() as f64);
        }
        (ys, mu)
    }
}

/// Estimates and MSE estimates of one replicate.
#[derive(Default)]
struct ReplicateOut {
    estimates: BTreeMap<Estimator, Option<Vec<f64>>>,
    mse: BTreeMap<(Estimator, MseMethod), Option<Vec<f64>>>,
}

fn run_replicate(
    config: &SimConfig,
    fx: &Fixture,
    y: Vec<Vec<f64>>,
    mse_seed: Option<u64>,
) -> ReplicateOut {
    let sample = fx.sample.with_responses(y);
    let mut out = ReplicateOut::default();
    let wanted = |e: Estimator| {
        config.estimators.contains(&e) || config.mse_methods.iter().any(|(m, _)| *m == e)
    };
    let mse_for = |e: Estimator| -> Vec<MseMethod> {
        if mse_seed.is_none() {
            return Vec::new();
        }
        config
            .mse_methods
            .iter()
            .filter(|(m, _)| *m == e)
            .map(|(_, k)| *k)
            .collect()
    };
    let b = config.b;
    let seed_of = |e: Estimator| derive_seed(mse_seed.unwrap_or(0), &[e as u64]);

    let data_dir = aggregate(&sample, config.weights, &fx.xbar)
        .and_then(|d| attach_psi0(&d, &sample, config.weights, config.direct_design));
    let data_base = aggregate(&sample, WeightKind::Base, &fx.xbar);
    let data_cal = if sample.has_calibrated() {
        aggregate(&sample, WeightKind::Calibrated, &fx.xbar).ok()
    } else {
        None
    };
    let dir_source = match config.weights {
        WeightKind::Base => StructureSource::Base,
        WeightKind::Calibrated => StructureSource::Calibrated,
    };

    let fhd_boot = mse_for(Estimator::Fhd).iter().any(|m| *m != MseMethod::Pr);
    let bhf = if wanted(Estimator::U) || wanted(Estimator::Yr) || fhd_boot {
        fit_reml_bhf(&sample).ok()
    } else {
        None
    };

    if config.estimators.contains(&Estimator::Dir) {
        out.estimates.insert(
            Estimator::Dir,
            data_dir.as_ref().ok().map(|d| direct_predictor(d).mu_hat()),
        );
    }

    if wanted(Estimator::Fhd) {
        let fhd = data_dir.as_ref().ok().and_then(|d| {
            let p0 = d.psi0()?;
            let fit = fit_reml_fh(d, &p0).ok()?;
            let est = area_predictor(&fit, d, Estimator::Fhd).ok()?;
            Some((d, p0, fit, est))
        });
        out.estimates
            .insert(Estimator::Fhd, fhd.as_ref().map(|f| f.3.mu_hat()));
        let methods = mse_for(Estimator::Fhd);
        // generator: unit-level fit with ψ̂_d = σ̂e² c_d
        let boot = if fhd_boot {
            fhd.as_ref().and_then(|(d, _, _, _)| {
                let mut gen = bhf.clone()?;
                gen.psi = gen
                    .structured_psi(&StructureConstants::from_area(d, dir_source))
                    .ok()?;
                bootstrap_mse_area(&gen, d, &AreaTarget::Fhd, b, seed_of(Estimator::Fhd)).ok()
            })
        } else {
            None
        };
        for m in methods {
            let v = match m {
                MseMethod::Pr => fhd
                    .as_ref()
                    .and_then(|(d, p0, fit, _)| mse_prasad_rao(fit, p0, d, Estimator::Fhd).ok())
                    .map(|r| r.mse()),
                MseMethod::Pb1 => boot.as_ref().map(|x| x.pb1.mse()),
                MseMethod::Pbt => boot.as_ref().and_then(|x| x.pbt.as_ref()).map(|r| r.mse()),
                MseMethod::Pb2 => boot.as_ref().and_then(|x| x.pb2.as_ref()).map(|r| r.mse()),
                MseMethod::Pb => None,
            };
            out.mse.insert((Estimator::Fhd, m), v);
        }
    }

    for (e, source, data) in [
        (
            Estimator::Fha,
            StructureSource::Base,
            data_base.as_ref().ok(),
        ),
        (
            Estimator::Ua,
            StructureSource::Calibrated,
            data_cal.as_ref(),
        ),
    ] {
        if !wanted(e) {
            continue;
        }
        let res = data.and_then(|d| {
            let fit =
                fit_reml_structured_area(d, &StructureConstants::from_area(d, source)).ok()?;
            let est = area_predictor(&fit, d, e).ok()?;
            Some((d, fit, est))
        });
        out.estimates.insert(e, res.as_ref().map(|r| r.2.mu_hat()));
        for m in mse_for(e) {
            let v = res.as_ref().and_then(|(d, fit, _)| match m {
                MseMethod::Pr => mse_prasad_rao(fit, &fit.psi, d, e).ok().map(|r| r.mse()),
                _ => {
                    let target = AreaTarget::Structured(StructureConstants::from_area(d, source));
                    bootstrap_mse_area(fit, d, &target, b, seed_of(e))
                        .ok()
                        .map(|r| r.pb1.mse())
                }
            });
            out.mse.insert((e, m), v);
        }
    }

    if wanted(Estimator::U) || wanted(Estimator::Yr) {
        for e in [Estimator::U, Estimator::Yr] {
            if !wanted(e) {
                continue;
            }
            let est = bhf
                .as_ref()
                .and_then(|f| unit_predictor(f, &sample, &fx.xbar, e).ok());
            out.estimates.insert(e, est.map(|s| s.mu_hat()));
            for m in mse_for(e) {
                let v = bhf
                    .as_ref()
                    .and_then(|f| bootstrap_mse_unit(f, &sample, &fx.xbar, e, b, seed_of(e)).ok())
                    .map(|r| r.mse());
                out.mse.insert((e, m), v);
            }
        }
    }
    out
}

struct RunOutput {
    truths: Vec<Vec<f64>>,
    reps: Vec<ReplicateOut>,
}

fn run_many(config: &SimConfig, fx: &Fixture, tag: u64, l: usize, with_mse: bool) -> RunOutput {
    let results: Vec<(Vec<f64>, ReplicateOut)> = (0..l)
        .into_par_iter()
        .map(|ell| {
            let mut rng = stream(config.seed, &[tag, ell as u64]);
            let (y, mu) = fx.replicate(config, &mut rng);
            let mse_seed = with_mse.then(|| derive_seed(config.seed, &[3, ell as u64]));
            (mu, run_replicate(config, fx, y, mse_seed))
        })
        .collect();
    let (truths, reps) = results.into_iter().unzip();
    RunOutput { truths, reps }
}

/// Successful replicates of one estimator as (estimates, truths), or an
/// error when more than 5% failed.
fn successes(run: &RunOutput, e: Estimator) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, usize)> {
    let mut est = Vec::new();
    let mut tru = Vec::new();
    let mut failed = 0;
    for (r, t) in run.reps.iter().zip(&run.truths) {
        match r.estimates.get(&e) {
            Some(Some(v)) => {
                est.push(v.clone());
                tru.push(t.clone());
            }
            _ => failed += 1,
        }
    }
    let total = run.reps.len();
    if failed as f64 > crate::mse::MAX_FAILURE_SHARE * total as f64 {
        return Err(SaeError::TooManyFailures { failed, total });
    }
    Ok((est, tru, failed))
}

fn mean_and_se(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    if n < 2.0 {
        return (mean, 0.0);
    }
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Run the full experiment described by `config`.
pub fn run_experiment(config: &SimConfig) -> Result<SimResult> {
    config.validate()?;
    let fx = Fixture::new(config)?;
    let ids = config.area_ids();
    let with_mse = !config.mse_methods.is_empty();
    let main = run_many(config, &fx, 2, config.l, with_mse);

    let mut per_area = Vec::new();
    let mut failures = BTreeMap::new();
    for &e in &config.estimators {
        let (est, tru, failed) = successes(&main, e)?;
        failures.insert(e, failed);
        for (k, m) in compute_metrics(&est, &tru)?.into_iter().enumerate() {
            per_area.push(AreaMetric {
                area_id: ids[k].clone(),
                n_d: config.sample_sizes[k],
                estimator: e,
                metrics: m,
            });
        }
    }
    let mut sizes: Vec<usize> = config.sample_sizes.clone();
    sizes.sort_unstable();
    sizes.dedup();
    let mut groups = Vec::new();
    for &e in &config.estimators {
        for &n in &sizes {
            let members: Vec<&AreaMetric> = per_area
                .iter()
                .filter(|a| a.estimator == e && a.n_d == n)
                .collect();
            let k = members.len() as f64;
            groups.push(GroupMetric {
                n_d: n,
                estimator: e,
                arb: members.iter().map(|a| a.metrics.rb.abs()).sum::<f64>() / k,
                rrmse: members.iter().map(|a| a.metrics.rrmse).sum::<f64>() / k,
                mse: members.iter().map(|a| a.metrics.mse).sum::<f64>() / k,
            });
        }
    }

    let mut mse_eval = Vec::new();
    let mut mse_failures = BTreeMap::new();
    if with_mse {
        let reference = if config.l_true > 0 {
            let mut ref_cfg = config.clone();
            ref_cfg.mse_methods.clear();
            ref_cfg.estimators = config.mse_methods.iter().map(|(e, _)| *e).collect();
            ref_cfg.estimators.sort();
            ref_cfg.estimators.dedup();
            Some(run_many(&ref_cfg, &fx, 1, config.l_true, false))
        } else {
            None
        };
        let truth_run = reference.as_ref().unwrap_or(&main);
        for &(e, m) in &config.mse_methods {
            let (est, tru, _) = successes(truth_run, e)?;
            let ok: Vec<&Vec<f64>> = main
                .reps
                .iter()
                .filter_map(|r| r.mse.get(&(e, m)).and_then(|v| v.as_ref()))
                .collect();
            let failed = config.l - ok.len();
            if failed as f64 > crate::mse::MAX_FAILURE_SHARE * config.l as f64 {
                return Err(SaeError::TooManyFailures {
                    failed,
                    total: config.l,
                });
            }
            mse_failures.insert((e, m), failed);
            for k in 0..config.d {
                let (mean_mse, se) = mean_and_se(ok.iter().map(|v| v[k]));
                let (true_mse, true_se) =
                    mean_and_se(est.iter().zip(&tru).map(|(a, t)| (a[k] - t[k]).powi(2)));
                mse_eval.push(MseEval {
                    area_id: ids[k].clone(),
                    n_d: config.sample_sizes[k],
                    estimator: e,
                    method: m,
                    mean_mse,
                    se,
                    true_mse,
                    true_se,
                });
            }
        }
    }
    Ok(SimResult {
        config: config.clone(),
        per_area,
        groups,
        mse_eval,
        failures,
        mse_failures,
    })
}

/// Table-1 layout: one row per estimator, `arb_<n>,rrmse_<n>` per sample
/// size, in percent.
pub fn write_summary_csv<W: Write>(writer: W, res: &SimResult) -> Result<()> {
    let mut sizes: Vec<usize> = res.groups.iter().map(|g| g.n_d).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["estimator".to_string()];
    for n in &sizes {
        header.push(format!("arb_{n}"));
        header.push(format!("rrmse_{n}"));
    }
    wtr.write_record(&header)?;
    for e in &res.config.estimators {
        let mut rec = vec![e.as_str().to_string()];
        for n in &sizes {
            let g = res
                .group(*e, *n)
                .expect("group for every estimator and size");
            rec.push(fmt(100.0 * g.arb));
            rec.push(fmt(100.0 * g.rrmse));
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush().map_err(|e| SaeError::io("<summary csv>", e))?;
    Ok(())
}

/// `area_id,n_d,estimator,rb_pct,rrmse_pct,mse`.
pub fn write_per_area_csv<W: Write>(writer: W, res: &SimResult) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["area_id", "n_d", "estimator", "rb_pct", "rrmse_pct", "mse"])?;
    for a in &res.per_area {
        wtr.write_record([
            a.area_id.clone(),
            a.n_d.to_string(),
            a.estimator.as_str().to_string(),
            fmt(100.0 * a.metrics.rb),
            fmt(100.0 * a.metrics.rrmse),
            fmt(a.metrics.mse),
        ])?;
    }
    wtr.flush().map_err(|e| SaeError::io("<per-area csv>", e))?;
    Ok(())
}

/// `area_id,n_d,estimator,method,mean_mse,se,true_mse,true_se`.
pub fn write_mse_eval_csv<W: Write>(writer: W, res: &SimResult) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record([
        "area_id",
        "n_d",
        "estimator",
        "method",
        "mean_mse",
        "se",
        "true_mse",
        "true_se",
    ])?;
    for m in &res.mse_eval {
        wtr.write_record([
            m.area_id.clone(),
            m.n_d.to_string(),
            m.estimator.as_str().to_string(),
            m.method.as_str().to_string(),
            fmt(m.mean_mse),
            fmt(m.se),
            fmt(m.true_mse),
            fmt(m.true_se),
        ])?;
    }
    wtr.flush().map_err(|e| SaeError::io("<mse-eval csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> SimConfig {
        SimConfig {
            d: 6,
            pop_sizes: vec![200; 6],
            sample_sizes: vec![4, 4, 6, 6, 8, 8],
            l: 5,
            b: 50,
            ..SimConfig::default()
        }
    }

    #[test]
    fn metrics_closed_forms() {
        let truth = vec![vec![2.0, 4.0]; 3];
        let m = compute_metrics(&truth, &truth).unwrap();
        assert!(m.iter().all(|m| m.rb == 0.0 && m.rrmse == 0.0));
        let shifted: Vec<Vec<f64>> = truth
            .iter()
            .map(|t| t.iter().map(|v| v - 0.5).collect())
            .collect();
        let m = compute_metrics(&shifted, &truth).unwrap();
        assert!((m[0].rb + 0.25).abs() < 1e-15 && (m[0].rrmse - 0.25).abs() < 1e-15);
        // L = 2 hand case
        let est = vec![vec![1.0], vec![4.0]];
        let tru = vec![vec![2.0], vec![2.0]];
        let m = compute_metrics(&est, &tru).unwrap();
        assert!((m[0].rb - 0.25).abs() < 1e-15);
        assert!((m[0].rrmse - (2.5f64).sqrt() / 2.0).abs() < 1e-15);
        assert!(compute_metrics(&est, &[vec![1.0], vec![-1.0]]).is_err());
    }

    #[test]
    fn config_parse_and_errors() {
        let c = SimConfig::parse(
            "D = 10\nn = 3, 5\nn_repeat = 5\nN = 500\nL = 7 # short\nmse_methods = u:pb, fhd:pr\n",
        )
        .unwrap();
        assert_eq!(c.sample_sizes, vec![3, 3, 3, 3, 3, 5, 5, 5, 5, 5]);
        assert_eq!(c.pop_sizes, vec![500; 10]);
        assert_eq!(c.l, 7);
        assert_eq!(
            c.mse_methods,
            vec![
                (Estimator::U, MseMethod::Pb),
                (Estimator::Fhd, MseMethod::Pr)
            ]
        );
        assert!(SimConfig::parse("bogus = 1").is_err());
        assert!(SimConfig::parse("mse_methods = u:pr").is_err());
        assert!(SimConfig::parse("D = 4\nn = 3").is_err());
        for (name, _) in BUILTIN_CONFIGS {
            SimConfig::load(name).unwrap();
        }
    }

    #[test]
    fn population_and_sample() {
        let c = small_config();
        let f1 = generate_population(&c, 9).unwrap();
        let f2 = generate_population(&c, 9).unwrap();
        assert_eq!(f1.areas[3].x, f2.areas[3].x);
        assert_eq!(f1.areas[3].y, f2.areas[3].y);
        let s = draw_srswor(&f1, &c.sample_sizes, 9).unwrap();
        for (a, n) in s.areas.iter().zip(&c.sample_sizes) {
            assert_eq!(a.n(), *n);
            assert!(a.w.iter().all(|w| *w == 200.0 / *n as f64));
        }
        let full = draw_srswor(&f1, &[200; 6], 1).unwrap();
        assert_eq!(full.areas[0].y, f1.areas[0].y.clone().unwrap());
        assert!(draw_srswor(&f1, &[201, 1, 1, 1, 1, 1], 1).is_err());
    }

    #[test]
    fn truth_is_population_mean() {
        let c = small_config();
        let fx = Fixture::new(&c).unwrap();
        let mut rng = stream(5, &[0]);
        let (ys, mu) = fx.replicate(&c, &mut rng);
        assert_eq!(ys[0].len(), 4);
        // replaying the stream gives the full population total
        let mut rng = stream(5, &[0]);
        let su = c.sigma_u2.sqrt();
        let u: Vec<f64> = (0..c.d)
            .map(|_| su * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut grand = 0.0;
        for (k, xb) in fx.unit_xb.iter().enumerate() {
            for m in xb {
                grand += m + u[k] + c.sigma_e2.sqrt() * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let total: f64 = mu
            .iter()
            .zip(&c.pop_sizes)
            .map(|(m, n)| m * *n as f64)
            .sum();
        assert!((total - grand).abs() < 1e-9 * grand.abs());
    }

    #[test]
    fn single_replicate_experiment() {
        let mut c = small_config();
        c.l = 1;
        c.estimators = vec![
            Estimator::Dir,
            Estimator::Fhd,
            Estimator::Fha,
            Estimator::Ua,
            Estimator::U,
            Estimator::Yr,
        ];
        let r = run_experiment(&c).unwrap();
        assert_eq!(r.per_area.len(), 36);
        for g in &r.groups {
            let members: Vec<_> = r
                .per_area
                .iter()
                .filter(|a| a.estimator == g.estimator && a.n_d == g.n_d)
                .collect();
            let avg = members.iter().map(|a| a.metrics.rrmse).sum::<f64>() / members.len() as f64;
            assert!((avg - g.rrmse).abs() < 1e-15);
        }
        let mut buf = Vec::new();
        write_summary_csv(&mut buf, &r).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("estimator,arb_4,rrmse_4,arb_6,rrmse_6,arb_8,rrmse_8\n"));
    }
}
