//! Command-line front end.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::em::{fit_mle, EmOptions};
use crate::error::{Error, Result};
use crate::inference::{bootstrap_sd, Estimate, FitterEstimate, SimexEstimate};
use crate::io::{
    center_columns, ingest_csv, mc_rows, write_csv, write_json, write_km_csv, write_mc_csv,
    BootstrapOutput, FitReport, SimexReport,
};
use crate::mc::{
    generate, parameter_names, run_study_both, ErrorKind, ErrorLevel, Method, ScenarioSpec,
    StudyOptions,
};
use crate::model::{kaplan_meier, Dataset, ModelLayout};
use crate::presmooth::{fit_presmooth, Bandwidth, PresmoothOptions};
use crate::rng::StreamKey;
use crate::simex::{run_simex, CureFitter, Extrapolant, MleFitter, PresmoothFitter, SimexOptions};

/// Exit status for invalid input.
pub const EXIT_INVALID: u8 = 2;
/// Exit status for estimation failures beyond the tolerated share.
pub const EXIT_ESTIMATION: u8 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "cure-simex",
    version,
    about = "Mixture cure models with SIMEX measurement-error correction"
)]
pub struct Cli {
    /// Worker threads; results do not depend on it [default: available cores]
    #[arg(long, global = true, env = "CURE_SIMEX_JOBS")]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a logistic/Cox mixture cure model
    Fit(FitArgs),
    /// Fit with SIMEX correction for covariate measurement error
    Simex(SimexArgs),
    /// Simulate a dataset from one of the built-in designs
    Simulate(SimulateArgs),
    /// Run a Monte Carlo study described by a TOML file
    McRun(McRunArgs),
    /// Bootstrap standard errors and Wald p-values
    Bootstrap(BootstrapArgs),
    /// Kaplan-Meier curve as a two-column CSV
    Km(KmArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMethod {
    Mle,
    Presmooth,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitArgs {
    /// Input CSV with `time`, `status` and covariate columns
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "mle")]
    pub method: FitMethod,
    /// Incidence covariates, comma separated [default: all]
    #[arg(long, value_delimiter = ',')]
    pub incidence: Option<Vec<String>>,
    /// Latency covariates, comma separated [default: all]
    #[arg(long, value_delimiter = ',')]
    pub latency: Option<Vec<String>>,
    /// Covariates to center at their mean before fitting [default: none]
    #[arg(long, value_delimiter = ',')]
    pub center: Vec<String>,
    /// Presmoothing bandwidth [default: cross-validated]
    #[arg(long)]
    pub bandwidth: Option<f64>,
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-7)]
    pub tol: f64,
    /// Output file [default: stdout]
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ErrorArgs {
    /// Error standard deviations, either one per covariate or `name=sd` pairs [default: none]
    #[arg(long, value_delimiter = ',', conflicts_with = "error_cov")]
    pub error_sd: Vec<String>,
    /// CSV file holding the error covariance matrix, no header [default: none]
    #[arg(long)]
    pub error_cov: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.5,1,1.5,2")]
    pub lambdas: Vec<f64>,
    /// Contaminated replicates per level
    #[arg(long = "B", default_value_t = 50)]
    pub b: usize,
    #[arg(long, default_value = "quadratic", value_parser = parse_extrapolant)]
    pub extrapolant: Extrapolant,
    /// Isotonize a non-monotone extrapolated baseline
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub isotonize: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimexArgs {
    #[command(flatten)]
    pub fit: FitArgs,
    #[command(flatten)]
    pub error: ErrorArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    /// Model 1 to 5
    #[arg(long)]
    pub model: u8,
    /// Model 1 only: setting 1 to 3
    #[arg(long, default_value_t = 1)]
    pub setting: u8,
    #[arg(long, default_value_t = 1)]
    pub scenario: u8,
    /// Model 1 only: censoring level 1 or 2
    #[arg(long, default_value_t = 1)]
    pub cens: u8,
    #[arg(long, value_enum, default_value = "large")]
    pub error_level: CliErrorLevel,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file [default: stdout]
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Also write the error-free covariates here [default: not written]
    #[arg(long)]
    pub latent_output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum CliErrorLevel {
    Small,
    Large,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct McRunArgs {
    /// Study file (TOML)
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the replicate count [default: from the study file]
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Directory for `<arm>.csv` and `<arm>.json`
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BootstrapArgs {
    #[command(flatten)]
    pub fit: FitArgs,
    #[arg(long, default_value_t = 1000)]
    pub n_boot: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Bootstrap the SIMEX-corrected estimates
    #[arg(long)]
    pub simex: bool,
    #[command(flatten)]
    pub error: ErrorArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct KmArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Output file [default: stdout]
    #[arg(long)]
    pub output: Option<PathBuf>,
}

fn parse_extrapolant(s: &str) -> std::result::Result<Extrapolant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Parses arguments, runs the command and maps errors to exit codes.
pub fn main_with_args<I, T>(args: I) -> std::process::ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return std::process::ExitCode::from(if e.use_stderr() { EXIT_INVALID } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::ExitCode::from(match e {
                Error::Estimation(_) => EXIT_ESTIMATION,
                _ => EXIT_INVALID,
            })
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(Error::invalid("--jobs must be at least 1"));
        }
        builder = builder.num_threads(j);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Fit(a) => cmd_fit(&a),
        Command::Simex(a) => cmd_simex(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::McRun(a) => cmd_mc_run(&a),
        Command::Bootstrap(a) => cmd_bootstrap(&a),
        Command::Km(a) => cmd_km(&a),
    })
}

fn open_output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn resolve_columns(data: &Dataset, names: &Option<Vec<String>>) -> Result<Vec<usize>> {
    match names {
        None => Ok((0..data.dim()).collect()),
        Some(list) => list
            .iter()
            .filter(|s| !s.is_empty())
            .map(|n| {
                data.column_names()
                    .iter()
                    .position(|c| c == n)
                    .ok_or_else(|| Error::invalid(format!("no covariate named `{n}`")))
            })
            .collect(),
    }
}

struct Prepared {
    data: Dataset,
    layout: ModelLayout,
    em: EmOptions,
    presmooth: PresmoothOptions,
}

fn prepare(a: &FitArgs, error_cov: Option<DMatrix<f64>>) -> Result<Prepared> {
    let data = ingest_csv(&a.data)?;
    let center = resolve_columns(&data, &Some(a.center.clone()))?;
    let (data, _) = center_columns(&data, &center)?;
    let inc = resolve_columns(&data, &a.incidence)?;
    let lat = resolve_columns(&data, &a.latency)?;
    let v = error_cov.unwrap_or_else(|| DMatrix::zeros(data.dim(), data.dim()));
    let layout = ModelLayout::new(inc, lat, v)?;
    let em = EmOptions {
        max_iter: a.max_iter,
        tol: a.tol,
        ..EmOptions::default()
    };
    em.validate()?;
    let presmooth = PresmoothOptions {
        bandwidth: a.bandwidth.map_or(Bandwidth::Auto, Bandwidth::Fixed),
        em,
        ..PresmoothOptions::default()
    };
    Ok(Prepared {
        data,
        layout,
        em,
        presmooth,
    })
}

fn fitter(p: &Prepared, method: FitMethod) -> Result<Box<dyn CureFitter>> {
    Ok(match method {
        FitMethod::Mle => Box::new(MleFitter { opts: p.em }),
        FitMethod::Presmooth => Box::new(PresmoothFitter::new(&p.data, &p.layout, &p.presmooth)?),
    })
}

fn config_json<T: Serialize>(args: &T) -> serde_json::Value {
    serde_json::to_value(args).unwrap_or(serde_json::Value::Null)
}

fn cmd_fit(a: &FitArgs) -> Result<()> {
    let p = prepare(a, None)?;
    let (fit, resolved) = match a.method {
        FitMethod::Mle => (fit_mle(&p.data, &p.layout, &p.em)?, config_json(&p.em)),
        FitMethod::Presmooth => {
            let opts = p.presmooth.resolved(&p.data, &p.layout)?;
            (
                fit_presmooth(&p.data, &p.layout, &opts)?,
                config_json(&opts),
            )
        }
    };
    let mut config = config_json(a);
    if let Some(obj) = config.as_object_mut() {
        let key = match a.method {
            FitMethod::Mle => "em",
            FitMethod::Presmooth => "presmooth",
        };
        obj.insert(key.into(), resolved);
    }
    write_json(&FitReport::new(&fit, config), open_output(&a.output)?)
}

fn error_covariance(e: &ErrorArgs, data_path: &Path) -> Result<DMatrix<f64>> {
    let data = ingest_csv(data_path)?;
    let d = data.dim();
    if let Some(path) = &e.error_cov {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)?;
        let mut vals = Vec::new();
        for row in r.records() {
            let row = row?;
            let line = row.position().map_or(0, |p| p.line() as usize);
            for cell in row.iter() {
                vals.push(cell.parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    message: format!("`{cell}` is not a number"),
                })?);
            }
        }
        if vals.len() != d * d {
            return Err(Error::invalid(format!(
                "error covariance must be {d} x {d}"
            )));
        }
        return Ok(DMatrix::from_row_slice(d, d, &vals));
    }
    if e.error_sd.is_empty() {
        return Err(Error::invalid("SIMEX needs --error-sd or --error-cov"));
    }
    let mut sd = vec![0.0; d];
    if e.error_sd.iter().all(|s| s.contains('=')) {
        for pair in &e.error_sd {
            let (name, value) = pair.split_once('=').expect("checked");
            let j = data
                .column_names()
                .iter()
                .position(|c| c == name.trim())
                .ok_or_else(|| Error::invalid(format!("no covariate named `{name}`")))?;
            sd[j] = parse_sd(value)?;
        }
    } else {
        if e.error_sd.len() != d {
            return Err(Error::invalid(format!(
                "--error-sd needs {d} values or name=sd pairs"
            )));
        }
        for (s, v) in sd.iter_mut().zip(&e.error_sd) {
            *s = parse_sd(v)?;
        }
    }
    Ok(DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        d,
        sd.iter().map(|s| s * s),
    )))
}

fn parse_sd(s: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::invalid(format!("`{s}` is not a number")))?;
    if !(v >= 0.0) || !v.is_finite() {
        return Err(Error::invalid(
            "error standard deviations must be nonnegative",
        ));
    }
    Ok(v)
}

fn simex_options(e: &ErrorArgs, seed: u64) -> Result<SimexOptions> {
    let o = SimexOptions {
        lambdas: e.lambdas.clone(),
        b: e.b,
        extrapolant: e.extrapolant,
        isotonize: e.isotonize,
        seed,
    };
    o.validate()?;
    Ok(o)
}

fn cmd_simex(a: &SimexArgs) -> Result<()> {
    let v = error_covariance(&a.error, &a.fit.data)?;
    let p = prepare(&a.fit, Some(v))?;
    let opts = simex_options(&a.error, a.seed)?;
    let f = fitter(&p, a.fit.method)?;
    let res = run_simex(&p.data, &p.layout, f.as_ref(), &opts)?;
    let mut config = config_json(a);
    if let Some(obj) = config.as_object_mut() {
        obj.insert("simex".into(), config_json(&opts));
        obj.insert(
            "error_cov".into(),
            config_json(
                &p.layout
                    .error_cov
                    .row_iter()
                    .map(|r| r.iter().copied().collect::<Vec<_>>())
                    .collect::<Vec<_>>(),
            ),
        );
    }
    write_json(&SimexReport::new(&res, config), open_output(&a.fit.output)?)
}

fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let level = match a.error_level {
        CliErrorLevel::Small => ErrorLevel::Small,
        CliErrorLevel::Large => ErrorLevel::Large,
    };
    let spec = preset(a.model, a.setting, a.scenario, a.cens)?
        .with_error_level(level)?
        .with_n(a.n);
    let g = generate(&spec, StreamKey::new(a.seed))?;
    write_csv(&g.observed, open_output(&a.output)?)?;
    if let Some(path) = &a.latent_output {
        write_csv(&g.latent, open_output(&Some(path.clone()))?)?;
    }
    Ok(())
}

fn preset(model: u8, setting: u8, scenario: u8, cens: u8) -> Result<ScenarioSpec> {
    if model == 1 {
        ScenarioSpec::model1(setting, scenario, cens)
    } else {
        ScenarioSpec::preset(model, scenario)
    }
}

fn cmd_km(a: &KmArgs) -> Result<()> {
    let data = ingest_csv(&a.data)?;
    write_km_csv(&kaplan_meier(&data)?, open_output(&a.output)?)
}

fn cmd_bootstrap(a: &BootstrapArgs) -> Result<()> {
    let v = if a.simex {
        Some(error_covariance(&a.error, &a.fit.data)?)
    } else {
        None
    };
    let p = prepare(&a.fit, v)?;
    let f = fitter(&p, a.fit.method)?;
    let simex_est;
    let plain_est;
    let mut config = config_json(a);
    let est: &dyn Estimate = if a.simex {
        let opts = simex_options(&a.error, a.seed)?;
        if let Some(obj) = config.as_object_mut() {
            obj.insert("simex".into(), config_json(&opts));
        }
        simex_est = SimexEstimate {
            fitter: f.as_ref(),
            opts,
        };
        &simex_est
    } else {
        plain_est = FitterEstimate(f.as_ref());
        &plain_est
    };
    let report = bootstrap_sd(&p.data, &p.layout, est, a.n_boot, a.seed)?;
    let out = BootstrapOutput {
        parameters: parameter_names(p.layout.n_gamma(), p.layout.n_beta()),
        report,
        config,
    };
    write_json(&out, open_output(&a.fit.output)?)
}

/// A Monte Carlo study file: global `seed` and `replicates`, then one
/// `[arm.<name>]` table per design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub seed: u64,
    pub replicates: usize,
    pub arm: BTreeMap<String, ArmConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfig {
    pub model: u8,
    #[serde(default = "one")]
    pub setting: u8,
    #[serde(default = "one")]
    pub scenario: u8,
    #[serde(default = "one")]
    pub cens: u8,
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub error_level: Option<ErrorLevel>,
    /// Overrides the true error standard deviations.
    #[serde(default)]
    pub error_sd: Option<Vec<f64>>,
    #[serde(default)]
    pub error_kind: Option<ErrorKind>,
    /// Error standard deviations SIMEX assumes, if different from the truth.
    #[serde(default)]
    pub assumed_error_sd: Option<Vec<f64>>,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub extrapolant: Option<Extrapolant>,
    #[serde(default, rename = "B")]
    pub b: Option<usize>,
    #[serde(default)]
    pub lambdas: Option<Vec<f64>>,
    /// Overrides the arm's seed offset; arms otherwise use the study seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn one() -> u8 {
    1
}

impl ArmConfig {
    pub fn scenario_spec(&self) -> Result<ScenarioSpec> {
        let mut spec = preset(self.model, self.setting, self.scenario, self.cens)?;
        if let Some(l) = self.error_level {
            spec.set_error_level(l)?;
        }
        if let Some(n) = self.n {
            spec.n = n;
        }
        if let Some(sd) = &self.error_sd {
            spec.error_sd = sd.clone();
        }
        if let Some(k) = self.error_kind {
            spec.error_kind = k;
        }
        spec.assumed_error_sd = self.assumed_error_sd.clone();
        spec.validate()?;
        Ok(spec)
    }

    pub fn study_options(&self) -> Result<StudyOptions> {
        let mut o = StudyOptions::default();
        if let Some(e) = self.extrapolant {
            o.simex.extrapolant = e;
        }
        if let Some(b) = self.b {
            o.simex.b = b;
        }
        if let Some(l) = &self.lambdas {
            o.simex.lambdas = l.clone();
        }
        o.simex.validate()?;
        Ok(o)
    }
}

pub fn parse_study(text: &str) -> Result<StudyConfig> {
    let cfg: StudyConfig = toml::from_str(text).map_err(|e| Error::Parse {
        line: e.span().map_or(0, |s| {
            text[..s.start.min(text.len())].lines().count().max(1)
        }),
        message: e.message().to_string(),
    })?;
    if cfg.arm.is_empty() {
        return Err(Error::invalid("study has no arms"));
    }
    for (name, arm) in &cfg.arm {
        if arm.methods.is_empty() {
            return Err(Error::invalid(format!("arm `{name}` lists no methods")));
        }
        arm.scenario_spec()?;
        arm.study_options()?;
    }
    Ok(cfg)
}

#[derive(Debug, Serialize)]
struct ArmOutput<'a> {
    arm: &'a str,
    seed: u64,
    replicates: usize,
    scenario: ScenarioSpec,
    options: StudyOptions,
    methods: BTreeMap<String, crate::mc::McSummary>,
}

fn cmd_mc_run(a: &McRunArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.config)?;
    let cfg = parse_study(&text)?;
    let replicates = a.replicates.unwrap_or(cfg.replicates);
    std::fs::create_dir_all(&a.out_dir)?;
    for (name, arm) in &cfg.arm {
        let spec = arm.scenario_spec()?;
        let opts = arm.study_options()?;
        let seed = arm.seed.unwrap_or(cfg.seed);
        let mut rows = Vec::new();
        let mut summaries = BTreeMap::new();
        for estimator in [crate::mc::Estimator::Mle, crate::mc::Estimator::Presmooth] {
            let wanted: Vec<Method> = arm
                .methods
                .iter()
                .copied()
                .filter(|m| m.estimator() == estimator)
                .collect();
            if wanted.is_empty() {
                continue;
            }
            let with_simex = wanted.iter().any(|m| m.is_simex());
            let res = run_study_both(&spec, estimator, with_simex, replicates, &opts, seed)?;
            for m in &wanted {
                let s = if m.is_simex() {
                    res.simex.clone().expect("requested")
                } else {
                    res.naive.clone()
                };
                summaries.insert(m.name().to_string(), s);
            }
        }
        for m in &arm.methods {
            rows.extend(mc_rows(m.name(), &summaries[m.name()]));
        }
        let csv_path = a.out_dir.join(format!("{name}.csv"));
        write_mc_csv(&rows, std::fs::File::create(&csv_path)?)?;
        let out = ArmOutput {
            arm: name,
            seed,
            replicates,
            scenario: spec,
            options: opts,
            methods: summaries,
        };
        write_json(
            &out,
            std::fs::File::create(a.out_dir.join(format!("{name}.json")))?,
        )?;
    }
    Ok(())
}
