//! `sae` command line: calibrate, direct, fit, predict, mse, simulate,
//! diagnose.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;

use crate::calibration::{calibrate_sample, load_targets_csv};
use crate::data::{
    aggregate, fmt, load_area_csv, load_area_sizes, load_unit_csv, write_area_csv, write_unit_csv,
};
use crate::data::{AreaDataset, UnitSample, UnitSchema, WeightKind};
use crate::diagnostics::{
    residual_diagnostics, write_effects_csv, write_hist_csv, write_qq_csv, write_residuals_csv,
};
use crate::direct::{attach_psi0, DesignKind};
use crate::error::{Result, SaeError};
use crate::mse::{
    bootstrap_mse_area, bootstrap_mse_unit, mse_prasad_rao, write_mse_csv, AreaTarget, MseMethod,
    MseReport,
};
use crate::predictors::{
    area_predictor, direct_predictor, population_means, unit_predictor, write_estimates_csv,
    Estimator,
};
use crate::simulate::{
    run_experiment, write_mse_eval_csv, write_per_area_csv, write_summary_csv, SimConfig,
};
use crate::varcomp::{
    fit_reml_bhf, fit_reml_fh, fit_reml_structured_area, StructureConstants, StructureSource,
    VarComponentFit,
};

#[derive(Debug, Parser)]
#[command(name = "sae", version, about = "Small-area estimation of domain means")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "SAE_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Linear calibration of the base weights to known area totals.
    Calibrate(CalibrateArgs),
    /// Direct estimates and their design variances, as an area CSV.
    Direct(DirectArgs),
    /// REML fit of an area- or unit-level model.
    Fit(FitArgs),
    /// Small-area predictions.
    Predict(PredictArgs),
    /// MSE estimates of a predictor.
    Mse(MseArgs),
    /// Monte Carlo experiment from a config file.
    Simulate(SimulateArgs),
    /// Unit-level residuals of a nested-error fit.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Args)]
pub struct UnitInput {
    /// Unit CSV: area_id,y,x1..xp,weight[,weight_cal][,N].
    #[arg(long)]
    pub unit_csv: Option<PathBuf>,
    /// Area sizes `area_id,N` when the unit CSV has no N column.
    #[arg(long)]
    pub sizes: Option<PathBuf>,
}

impl UnitInput {
    fn load(&self) -> Result<Option<UnitSample>> {
        let Some(path) = &self.unit_csv else {
            return Ok(None);
        };
        let sizes = self.sizes.as_ref().map(load_area_sizes).transpose()?;
        load_unit_csv(path, &UnitSchema::default(), sizes.as_ref()).map(Some)
    }

    fn require(&self) -> Result<UnitSample> {
        self.load()?
            .ok_or_else(|| SaeError::Config("--unit-csv is required for this command".into()))
    }
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub input: UnitInput,
    /// Known totals `area_id,total_1,..`.
    #[arg(long)]
    pub targets_csv: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DesignArg {
    Srswor,
    General,
    Regression,
}

impl From<DesignArg> for DesignKind {
    fn from(d: DesignArg) -> Self {
        match d {
            DesignArg::Srswor => DesignKind::Srswor,
            DesignArg::General => DesignKind::General,
            DesignArg::Regression => DesignKind::Regression,
        }
    }
}

#[derive(Debug, Args)]
pub struct DirectArgs {
    #[command(flatten)]
    pub input: UnitInput,
    /// Known totals; supplies the covariate means X̄_d.
    #[arg(long)]
    pub targets_csv: PathBuf,
    /// Use the calibrated weights.
    #[arg(long)]
    pub calibrated: bool,
    #[arg(long, value_enum, default_value = "general")]
    pub design: DesignArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Fh,
    FhStructured,
    Bhf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StructureArg {
    Base,
    Calibrated,
    Srswor,
}

impl From<StructureArg> for StructureSource {
    fn from(s: StructureArg) -> Self {
        match s {
            StructureArg::Base => StructureSource::Base,
            StructureArg::Calibrated => StructureSource::Calibrated,
            StructureArg::Srswor => StructureSource::Srswor,
        }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long, value_enum)]
    pub model: ModelArg,
    /// Area CSV for the area-level models.
    #[arg(long)]
    pub area_csv: Option<PathBuf>,
    #[command(flatten)]
    pub input: UnitInput,
    /// Error-variance structure of `fh-structured`.
    #[arg(long, value_enum, default_value = "calibrated")]
    pub structure: StructureArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Inputs shared by `predict` and `mse`.
#[derive(Debug, Args)]
pub struct ModelInput {
    /// dir, fhd, fha, ua, u or yr.
    #[arg(long)]
    pub estimator: Estimator,
    /// Area CSV (area-level estimators, or X̄_d for unit-level ones).
    #[arg(long)]
    pub area_csv: Option<PathBuf>,
    #[command(flatten)]
    pub input: UnitInput,
    /// Known totals; supplies X̄_d when aggregating a unit CSV.
    #[arg(long)]
    pub targets_csv: Option<PathBuf>,
    /// Design variance used for psi0 when aggregating a unit CSV.
    #[arg(long, value_enum, default_value = "general")]
    pub design: DesignArg,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub model: ModelInput,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GeneratorArg {
    /// Nested-error fit of the unit data.
    Unit,
    /// Structured area-level fit.
    Area,
}

#[derive(Debug, Args)]
pub struct MseArgs {
    #[command(flatten)]
    pub model: ModelInput,
    /// pr, pb, pb1, pbt or pb2 (comma-separated for several).
    #[arg(long, value_delimiter = ',', required = true)]
    pub method: Vec<MseMethod>,
    #[arg(long = "B", default_value_t = 500)]
    pub b: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Bootstrap generator of the FHD bootstrap (default: unit when unit
    /// data are given).
    #[arg(long, value_enum)]
    pub generator: Option<GeneratorArg>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Config file, or the name of a bundled scenario.
    #[arg(long)]
    pub config: String,
    #[arg(long = "L")]
    pub l: Option<usize>,
    #[arg(long = "L-true")]
    pub l_true: Option<usize>,
    #[arg(long = "B")]
    pub b: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for summary.csv, per_area.csv and mse_eval.csv.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub input: UnitInput,
    /// Histogram bins (default ⌈√n⌉).
    #[arg(long)]
    pub bins: Option<usize>,
    /// Directory for residuals.csv, qq.csv, hist.csv and effects.csv.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

/// Run the CLI and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(k) = cli.threads {
        if k == 0 {
            return Err(SaeError::Config("--threads must be at least 1".into()));
        }
        builder = builder.num_threads(k);
    }
    let pool = builder
        .build()
        .map_err(|e| SaeError::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Calibrate(a) => calibrate(a),
        Command::Direct(a) => direct(a),
        Command::Fit(a) => fit(a),
        Command::Predict(a) => predict(a),
        Command::Mse(a) => mse(a),
        Command::Simulate(a) => simulate(a),
        Command::Diagnose(a) => diagnose(a),
    })
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    match path {
        Some(p) => {
            let f = File::create(p).map_err(|e| SaeError::io(p, e))?;
            Ok(Box::new(BufWriter::new(f)))
        }
        None => Ok(Box::new(io::stdout().lock())),
    }
}

fn output_in(dir: &Path, name: &str) -> Result<Box<dyn Write>> {
    std::fs::create_dir_all(dir).map_err(|e| SaeError::io(dir, e))?;
    output(Some(&dir.join(name)))
}

fn calibrate(a: &CalibrateArgs) -> Result<()> {
    let sample = a.input.require()?;
    let targets = load_targets_csv(&a.targets_csv)?;
    let (out, report) = calibrate_sample(&sample, &targets)?;
    write_unit_csv(output(a.out.as_deref())?, &out)?;
    eprintln!(
        "calibrated {} areas; max constraint residual {:e}; {} non-positive weights",
        out.num_areas(),
        report.max_constraint_residual(),
        report.negative_count()
    );
    Ok(())
}

fn kind_of(calibrated: bool) -> WeightKind {
    if calibrated {
        WeightKind::Calibrated
    } else {
        WeightKind::Base
    }
}

fn direct(a: &DirectArgs) -> Result<()> {
    let sample = a.input.require()?;
    let targets = load_targets_csv(&a.targets_csv)?;
    let kind = kind_of(a.calibrated);
    let data = aggregate(&sample, kind, &targets.means(&sample)?)?;
    let data = attach_psi0(&data, &sample, kind, a.design.into())?;
    write_area_csv(output(a.out.as_deref())?, &data)
}

fn require_area(path: &Option<PathBuf>) -> Result<AreaDataset> {
    let p = path
        .as_ref()
        .ok_or_else(|| SaeError::Config("--area-csv is required for this model".into()))?;
    load_area_csv(p)
}

fn write_fit<W: Write>(writer: W, fit: &VarComponentFit) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["parameter", "value"])?;
    wtr.write_record(["method", fit.method.as_str()])?;
    for (k, b) in fit.beta.iter().enumerate() {
        wtr.write_record([format!("beta_{}", k + 1), fmt(*b)])?;
    }
    wtr.write_record(["sigma_u2".to_string(), fmt(fit.sigma_u2)])?;
    wtr.write_record([
        "sigma_e2".to_string(),
        fit.sigma_e2.map(fmt).unwrap_or_else(|| "NA".into()),
    ])?;
    wtr.write_record(["loglik_restricted".to_string(), fmt(fit.loglik_restricted)])?;
    wtr.write_record(["converged", if fit.converged { "true" } else { "false" }])?;
    wtr.write_record(["iterations".to_string(), fit.iterations.to_string()])?;
    wtr.write_record([
        "at_boundary",
        if fit.at_boundary { "true" } else { "false" },
    ])?;
    wtr.write_record([
        "max_leverage".to_string(),
        fit.max_leverage.map(fmt).unwrap_or_else(|| "NA".into()),
    ])?;
    wtr.flush().map_err(|e| SaeError::io("<fit report>", e))?;
    Ok(())
}

fn warn(fit: &VarComponentFit) {
    for w in &fit.warnings {
        eprintln!("warning: {w}");
    }
}

fn fit(a: &FitArgs) -> Result<()> {
    let fit = match a.model {
        ModelArg::Fh => {
            let data = require_area(&a.area_csv)?;
            let psi = data.psi0().ok_or_else(|| {
                SaeError::Validation("the fh model needs psi0 in every area".into())
            })?;
            fit_reml_fh(&data, &psi)?
        }
        ModelArg::FhStructured => {
            let data = require_area(&a.area_csv)?;
            fit_reml_structured_area(
                &data,
                &StructureConstants::from_area(&data, a.structure.into()),
            )?
        }
        ModelArg::Bhf => fit_reml_bhf(&a.input.require()?)?,
    };
    warn(&fit);
    write_fit(output(a.out.as_deref())?, &fit)
}

/// Loaded inputs of `predict` / `mse`.
struct Loaded {
    sample: Option<UnitSample>,
    /// Area data aggregated with the estimator's weights, or read from
    /// `--area-csv`.
    data: Option<AreaDataset>,
    xbar: Option<Vec<DVector<f64>>>,
}

fn load_model_input(m: &ModelInput) -> Result<Loaded> {
    let sample = m.input.load()?;
    let area_file = m.area_csv.as_ref().map(load_area_csv).transpose()?;
    let xbar = match (&sample, &m.targets_csv, &area_file) {
        (Some(s), Some(t), _) => Some(load_targets_csv(t)?.means(s)?),
        (Some(s), None, Some(d)) => Some(population_means(s, d)?),
        _ => None,
    };
    let e = m.estimator;
    let data = match (&area_file, &sample, &xbar) {
        (Some(d), _, _) => Some(d.clone()),
        (None, Some(s), Some(xb)) if !matches!(e, Estimator::U | Estimator::Yr) => {
            let kind = match e {
                Estimator::Fha => WeightKind::Base,
                Estimator::Ua => WeightKind::Calibrated,
                _ => kind_of(s.has_calibrated()),
            };
            let d = aggregate(s, kind, xb)?;
            Some(attach_psi0(&d, s, kind, m.design.into())?)
        }
        _ => None,
    };
    Ok(Loaded { sample, data, xbar })
}

fn need<'a, T>(v: &'a Option<T>, what: &str) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| SaeError::Config(format!("{what} is required for this estimator")))
}

fn structure_for(e: Estimator) -> StructureSource {
    if e == Estimator::Fha {
        StructureSource::Base
    } else {
        StructureSource::Calibrated
    }
}

fn area_fit(e: Estimator, data: &AreaDataset) -> Result<(VarComponentFit, Vec<f64>)> {
    let fit = match e {
        Estimator::Fhd => {
            let psi = data.psi0().ok_or_else(|| {
                SaeError::Validation(
                    "FHD needs psi0 in every area (n_d = 1 areas need a supplied psi0)".into(),
                )
            })?;
            fit_reml_fh(data, &psi)?
        }
        _ => {
            fit_reml_structured_area(data, &StructureConstants::from_area(data, structure_for(e)))?
        }
    };
    warn(&fit);
    let psi = fit.psi.clone();
    Ok((fit, psi))
}

fn predict(a: &PredictArgs) -> Result<()> {
    let e = a.model.estimator;
    let l = load_model_input(&a.model)?;
    let est = match e {
        Estimator::Dir => direct_predictor(need(
            &l.data,
            "--area-csv or --unit-csv with --targets-csv",
        )?),
        Estimator::Fhd | Estimator::Fha | Estimator::Ua => {
            let data = need(&l.data, "--area-csv or --unit-csv with --targets-csv")?;
            let (fit, _) = area_fit(e, data)?;
            area_predictor(&fit, data, e)?
        }
        Estimator::U | Estimator::Yr => {
            let sample = need(&l.sample, "--unit-csv")?;
            let xbar = need(&l.xbar, "--targets-csv or --area-csv")?;
            if e == Estimator::U && !sample.has_calibrated() {
                return Err(SaeError::Config(
                    "the U predictor needs calibrated weights (weight_cal); run the calibrate step first".into(),
                ));
            }
            let fit = fit_reml_bhf(sample)?;
            warn(&fit);
            unit_predictor(&fit, sample, xbar, e)?
        }
    };
    write_estimates_csv(output(a.out.as_deref())?, &est)
}

fn mse(a: &MseArgs) -> Result<()> {
    let e = a.model.estimator;
    let l = load_model_input(&a.model)?;
    let mut reports: Vec<MseReport> = Vec::new();
    match e {
        Estimator::U | Estimator::Yr => {
            if a.method.iter().any(|m| *m != MseMethod::Pb) {
                return Err(SaeError::Config(format!(
                    "only pb is available for {}",
                    e.as_str()
                )));
            }
            let sample = need(&l.sample, "--unit-csv")?;
            let xbar = need(&l.xbar, "--targets-csv or --area-csv")?;
            if e == Estimator::U && !sample.has_calibrated() {
                return Err(SaeError::Config(
                    "the U predictor needs calibrated weights (weight_cal); run the calibrate step first".into(),
                ));
            }
            let fit = fit_reml_bhf(sample)?;
            warn(&fit);
            reports.push(bootstrap_mse_unit(&fit, sample, xbar, e, a.b, a.seed)?);
        }
        Estimator::Dir => {
            return Err(SaeError::Config(
                "no MSE estimator for DIR; use its psi0".into(),
            ))
        }
        Estimator::Fhd => {
            let data = need(&l.data, "--area-csv or --unit-csv with --targets-csv")?;
            let (fit, psi0) = area_fit(e, data)?;
            if a.method.contains(&MseMethod::Pb) {
                return Err(SaeError::Config("FHD takes pr, pb1, pbt or pb2".into()));
            }
            let boot = if a.method.iter().any(|m| *m != MseMethod::Pr) {
                let source = if l.sample.as_ref().is_some_and(|s| s.has_calibrated())
                    || a.model.area_csv.is_some()
                {
                    StructureSource::Calibrated
                } else {
                    StructureSource::Base
                };
                let c = StructureConstants::from_area(data, source);
                let generator = a.generator.unwrap_or(if l.sample.is_some() {
                    GeneratorArg::Unit
                } else {
                    GeneratorArg::Area
                });
                let gen = match generator {
                    GeneratorArg::Unit => {
                        let mut g = fit_reml_bhf(need(&l.sample, "--unit-csv (unit generator)")?)?;
                        g.psi = g.structured_psi(&c)?;
                        g
                    }
                    GeneratorArg::Area => fit_reml_structured_area(data, &c)?,
                };
                Some(bootstrap_mse_area(
                    &gen,
                    data,
                    &AreaTarget::Fhd,
                    a.b,
                    a.seed,
                )?)
            } else {
                None
            };
            for m in &a.method {
                match m {
                    MseMethod::Pr => reports.push(mse_prasad_rao(&fit, &psi0, data, e)?),
                    MseMethod::Pb1 => {
                        reports.push(boot.as_ref().expect("bootstrap ran").pb1.clone())
                    }
                    MseMethod::Pbt => reports.extend(boot.as_ref().and_then(|b| b.pbt.clone())),
                    MseMethod::Pb2 => reports.extend(boot.as_ref().and_then(|b| b.pb2.clone())),
                    MseMethod::Pb => unreachable!(),
                }
            }
        }
        Estimator::Fha | Estimator::Ua => {
            let data = need(&l.data, "--area-csv or --unit-csv with --targets-csv")?;
            let (fit, psi) = area_fit(e, data)?;
            for m in &a.method {
                match m {
                    MseMethod::Pr => reports.push(mse_prasad_rao(&fit, &psi, data, e)?),
                    MseMethod::Pb1 => {
                        let target = AreaTarget::Structured(StructureConstants::from_area(
                            data,
                            structure_for(e),
                        ));
                        reports.push(bootstrap_mse_area(&fit, data, &target, a.b, a.seed)?.pb1);
                    }
                    other => {
                        return Err(SaeError::Config(format!(
                            "{} takes pr or pb1, not {}",
                            e.as_str(),
                            other.as_str()
                        )))
                    }
                }
            }
        }
    }
    for r in &reports {
        if r.failed > 0 {
            eprintln!(
                "warning: {} of {:?} bootstrap replicates failed and were dropped",
                r.failed, r.b
            );
        }
    }
    write_mse_csv(output(a.out.as_deref())?, &reports)
}

fn simulate(a: &SimulateArgs) -> Result<()> {
    let mut config = SimConfig::load(&a.config)?;
    if let Some(l) = a.l {
        config.l = l;
    }
    if let Some(l) = a.l_true {
        config.l_true = l;
    }
    if let Some(b) = a.b {
        config.b = b;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    let res = run_experiment(&config)?;
    write_summary_csv(output_in(&a.out_dir, "summary.csv")?, &res)?;
    write_per_area_csv(output_in(&a.out_dir, "per_area.csv")?, &res)?;
    if !res.mse_eval.is_empty() {
        write_mse_eval_csv(output_in(&a.out_dir, "mse_eval.csv")?, &res)?;
    }
    for (e, n) in &res.failures {
        if *n > 0 {
            eprintln!(
                "warning: {} failed in {n} of {} replicates",
                e.as_str(),
                config.l
            );
        }
    }
    Ok(())
}

fn diagnose(a: &DiagnoseArgs) -> Result<()> {
    let sample = a.input.require()?;
    let fit = fit_reml_bhf(&sample)?;
    warn(&fit);
    let report = residual_diagnostics(&fit, &sample, a.bins)?;
    write_residuals_csv(output_in(&a.out_dir, "residuals.csv")?, &report)?;
    write_qq_csv(output_in(&a.out_dir, "qq.csv")?, &report)?;
    write_hist_csv(output_in(&a.out_dir, "hist.csv")?, &report)?;
    write_effects_csv(output_in(&a.out_dir, "effects.csv")?, &report)?;
    Ok(())
}
