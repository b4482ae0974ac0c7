//! Simulation designs and the Monte Carlo loop.
//!
//! Five data-generating models are provided, each with its standard
//! parameter presets. Uncured event times follow the Weibull
//! proportional hazards model `S_u(t|z) = exp(-mu t^rho e^{beta'z})` with
//! `rho = 1.75`, `mu = 1.5`, truncated at `tau0`; censoring is exponential
//! with rate `lambda_C`, truncated at `tau`. Truncation sets values beyond
//! the bound equal to it.
//!
//! | model | covariate columns | incidence | latency | error on |
//! |---|---|---|---|---|
//! | 1 | `x ~ N(0,1)` | `x` | `x` | `x` |
//! | 2 | `x1 ~ U[-1,1]`, `x2 ~ Bern(0.5)` | both | both | `x1` |
//! | 3 | `x1`, `x2` as in 2, `z2 ~ N(0, 0.3^2)` | `x1, x2` | `x1, z2` | `z2` |
//! | 4 | `x ~ N(0,1)`, `z2 ~ U[-1,1]` | `x` | `x, z2` | both |
//! | 5 | `x ~ N(0,1)`, `z2 = -x + N(0, 0.5^2)` | `x` | `x, z2` | `z2` |

use rand::Rng as _;
use rand_distr::{ChiSquared, Distribution, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::EmOptions;
use crate::error::{Error, Result};
use crate::model::{logistic, Dataset, ModelLayout, SurvivalRecord};
use crate::presmooth::PresmoothOptions;
use crate::rng::{Purpose, Rng, StreamKey};
use crate::simex::{run_simex, CureFitter, MleFitter, PresmoothFitter, SimexOptions};

pub const WEIBULL_SHAPE: f64 = 1.75;
pub const WEIBULL_SCALE: f64 = 1.5;

/// Share of failed replicates above which a study aborts.
pub const MAX_REPLICATE_FAILURE_SHARE: f64 = 0.1;

/// Distribution of the true measurement error, scaled to sd `v`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ErrorKind {
    #[default]
    Normal,
    Uniform,
    StudentT {
        df: f64,
    },
    ChiSquared {
        df: f64,
    },
}

/// Draws mean-zero errors with a given standard deviation.
#[derive(Debug, Clone, Copy)]
pub struct ErrorSampler {
    kind: ErrorKind,
    scale: f64,
}

/// Sampler for `kind` errors with standard deviation `v`.
///
/// Uniform errors live on `(-a, a)` with `a = v sqrt(3)`; Student-t errors
/// are `a t_k` with `a = v sqrt((k-2)/k)`; chi-squared errors are
/// `a (chi2_k - k)` with `a = v / sqrt(2k)`.
pub fn perturbed_error_sampler(kind: ErrorKind, v: f64) -> Result<ErrorSampler> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(Error::invalid("error standard deviation must be positive"));
    }
    let scale = match kind {
        ErrorKind::Normal => v,
        ErrorKind::Uniform => v * 3f64.sqrt(),
        ErrorKind::StudentT { df } => {
            if !(df > 2.0) || !df.is_finite() {
                return Err(Error::invalid(
                    "Student-t errors need more than 2 degrees of freedom",
                ));
            }
            v * ((df - 2.0) / df).sqrt()
        }
        ErrorKind::ChiSquared { df } => {
            if !(df > 0.0) || !df.is_finite() {
                return Err(Error::invalid(
                    "chi-squared degrees of freedom must be positive",
                ));
            }
            v / (2.0 * df).sqrt()
        }
    };
    Ok(ErrorSampler { kind, scale })
}

impl ErrorSampler {
    pub fn sample(&self, rng: &mut Rng) -> f64 {
        match self.kind {
            ErrorKind::Normal => {
                let z: f64 = StandardNormal.sample(rng);
                self.scale * z
            }
            ErrorKind::Uniform => self.scale * rng.random_range(-1.0..1.0),
            ErrorKind::StudentT { df } => {
                self.scale * StudentT::new(df).expect("validated").sample(rng)
            }
            ErrorKind::ChiSquared { df } => {
                self.scale * (ChiSquared::new(df).expect("validated").sample(rng) - df)
            }
        }
    }
}

/// Target cure and censoring proportions of a preset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Targets {
    pub cure_rate: f64,
    pub censoring_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub model: u8,
    pub label: String,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub weibull_shape: f64,
    pub weibull_scale: f64,
    pub censor_rate: f64,
    pub tau0: f64,
    pub tau: f64,
    /// True error standard deviation per covariate column (0 = error free).
    pub error_sd: Vec<f64>,
    #[serde(default)]
    pub error_kind: ErrorKind,
    /// Error standard deviations assumed by SIMEX; defaults to the truth.
    #[serde(default)]
    pub assumed_error_sd: Option<Vec<f64>>,
    pub n: usize,
    #[serde(default)]
    pub targets: Option<Targets>,
}

/// Small or large measurement error of the standard designs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorLevel {
    Small,
    Large,
}

impl ScenarioSpec {
    /// Model 1: `setting` 1..=3 picks `gamma_2`, `scenario` 1..=2 the cure
    /// rate and `cens` 1..=2 the censoring level. Error sd 0.7.
    pub fn model1(setting: u8, scenario: u8, cens: u8) -> Result<ScenarioSpec> {
        let (g2, rows) = match setting {
            1 => (0.1, [(1.4, [0.09, 0.3]), (0.0, [0.13, 0.5])]),
            2 => (0.5, [(1.4, [0.07, 0.26]), (0.0, [0.15, 0.6])]),
            3 => (2.0, [(2.2, [0.1, 0.33]), (0.0, [0.2, 0.7])]),
            _ => return Err(Error::invalid("Model 1 settings are 1, 2 and 3")),
        };
        if !(1..=2).contains(&scenario) || !(1..=2).contains(&cens) {
            return Err(Error::invalid(
                "Model 1 scenarios and censoring levels are 1 and 2",
            ));
        }
        let (g1, rates) = rows[scenario as usize - 1];
        let cure = if scenario == 1 { 0.2 } else { 0.5 };
        let censoring = match (scenario, cens) {
            (1, 1) => 0.25,
            (1, _) => 0.35,
            (_, 1) => 0.55,
            _ => 0.65,
        };
        Ok(ScenarioSpec {
            model: 1,
            label: format!("model1/setting{setting}/scenario{scenario}/cens{cens}"),
            gamma: vec![g1, g2],
            beta: vec![1.0],
            weibull_shape: WEIBULL_SHAPE,
            weibull_scale: WEIBULL_SCALE,
            censor_rate: rates[cens as usize - 1],
            tau0: 7.0,
            tau: 9.0,
            error_sd: vec![0.7],
            error_kind: ErrorKind::Normal,
            assumed_error_sd: None,
            n: 200,
            targets: Some(Targets {
                cure_rate: cure,
                censoring_rate: censoring,
            }),
        })
    }

    /// Models 2 to 5, scenarios 1..=3, with the large error level.
    pub fn preset(model: u8, scenario: u8) -> Result<ScenarioSpec> {
        type Row = (&'static [f64], &'static [f64], f64, (f64, f64), f64, f64);
        let row: Row = match (model, scenario) {
            (2, 1) => (&[1.3, 1.0, 0.4], &[0.8, 0.3], 0.33, (4.0, 6.0), 0.2, 0.35),
            (2, 2) => (
                &[1.1, 1.3, -0.3],
                &[2.0, -0.8],
                0.08,
                (10.0, 12.0),
                0.3,
                0.35,
            ),
            (2, 3) => (&[-0.5, 1.5, 1.0], &[0.8, 0.3], 0.4, (4.0, 6.0), 0.5, 0.6),
            (3, 1) => (&[1.3, 1.0, 0.4], &[1.5, 0.5], 0.3, (6.0, 8.0), 0.2, 0.35),
            (3, 2) => (&[1.1, 1.3, -0.3], &[1.0, -1.0], 0.1, (6.0, 8.0), 0.3, 0.35),
            (3, 3) => (&[-0.5, 1.5, 1.0], &[0.5, 1.5], 0.3, (6.0, 8.0), 0.5, 0.6),
            (4, 1) => (&[1.4, 0.5], &[0.5, 0.1], 0.3, (5.0, 7.0), 0.2, 0.35),
            (4, 2) => (&[1.4, 2.0], &[0.1, 0.5], 0.12, (5.0, 7.0), 0.3, 0.35),
            (4, 3) => (&[0.0, -2.0], &[-1.5, 0.5], 0.5, (5.0, 7.0), 0.5, 0.6),
            (5, 1) => (&[1.4, 0.5], &[0.5, 0.1], 0.3, (4.0, 6.0), 0.2, 0.35),
            (5, 2) => (&[1.4, 2.0], &[0.1, -0.5], 0.13, (4.0, 6.0), 0.3, 0.35),
            (5, 3) => (&[0.0, 2.0], &[1.0, -1.0], 0.5, (6.0, 8.0), 0.5, 0.6),
            _ => {
                return Err(Error::invalid(
                    "presets cover models 2 to 5, scenarios 1 to 3",
                ))
            }
        };
        let (gamma, beta, censor_rate, (tau0, tau), cure_rate, censoring_rate) = row;
        let mut spec = ScenarioSpec {
            model,
            label: format!("model{model}/scenario{scenario}"),
            gamma: gamma.to_vec(),
            beta: beta.to_vec(),
            weibull_shape: WEIBULL_SHAPE,
            weibull_scale: WEIBULL_SCALE,
            censor_rate,
            tau0,
            tau,
            error_sd: vec![],
            error_kind: ErrorKind::Normal,
            assumed_error_sd: None,
            n: 200,
            targets: Some(Targets {
                cure_rate,
                censoring_rate,
            }),
        };
        spec.set_error_level(ErrorLevel::Large)?;
        Ok(spec)
    }

    /// Error standard deviations of the small and large settings.
    pub fn set_error_level(&mut self, level: ErrorLevel) -> Result<()> {
        let large = level == ErrorLevel::Large;
        self.error_sd = match self.model {
            1 => vec![0.7],
            2 => vec![if large { 0.4 } else { 0.2 }, 0.0],
            3 => vec![0.0, 0.0, if large { 0.2 } else { 0.1 }],
            4 => {
                if large {
                    vec![0.7, 0.4]
                } else {
                    vec![0.35, 0.2]
                }
            }
            5 => vec![0.0, if large { 0.78 } else { 0.39 }],
            _ => return Err(Error::invalid("models are numbered 1 to 5")),
        };
        Ok(())
    }

    pub fn with_error_level(mut self, level: ErrorLevel) -> Result<Self> {
        self.set_error_level(level)?;
        Ok(self)
    }

    pub fn with_n(mut self, n: usize) -> Self {
        self.n = n;
        self
    }

    /// Number of covariate columns of the model.
    pub fn dim(&self) -> usize {
        match self.model {
            1 => 1,
            2 | 4 | 5 => 2,
            _ => 3,
        }
    }

    fn columns(&self) -> (Vec<usize>, Vec<usize>) {
        match self.model {
            1 => (vec![0], vec![0]),
            2 => (vec![0, 1], vec![0, 1]),
            3 => (vec![0, 1], vec![0, 2]),
            _ => (vec![0], vec![0, 1]),
        }
    }

    pub fn column_names(&self) -> Vec<String> {
        let names: &[&str] = match self.model {
            1 => &["x"],
            2 => &["x1", "x2"],
            3 => &["x1", "x2", "z2"],
            _ => &["x", "z2"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    /// Layout for fitting, with the error covariance SIMEX should assume.
    pub fn layout(&self) -> Result<ModelLayout> {
        let (inc, lat) = self.columns();
        let sd = self.assumed_error_sd.as_ref().unwrap_or(&self.error_sd);
        ModelLayout::with_error_sd(inc, lat, sd)
    }

    /// `gamma` followed by `beta`.
    pub fn truth(&self) -> Vec<f64> {
        self.gamma.iter().chain(&self.beta).copied().collect()
    }

    pub fn parameter_names(&self) -> Vec<String> {
        parameter_names(self.gamma.len(), self.beta.len())
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.model) {
            return Err(Error::invalid("models are numbered 1 to 5"));
        }
        let (inc, lat) = self.columns();
        if self.gamma.len() != inc.len() + 1 || self.beta.len() != lat.len() {
            return Err(Error::invalid(format!(
                "model {} needs {} incidence and {} latency coefficients",
                self.model,
                inc.len() + 1,
                lat.len()
            )));
        }
        if self.error_sd.len() != self.dim() {
            return Err(Error::invalid(
                "one error sd per covariate column is required",
            ));
        }
        if let Some(a) = &self.assumed_error_sd {
            if a.len() != self.dim() {
                return Err(Error::invalid(
                    "one assumed error sd per covariate column is required",
                ));
            }
        }
        if self.error_sd.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::invalid(
                "error standard deviations must be nonnegative",
            ));
        }
        if !(self.censor_rate > 0.0) {
            return Err(Error::invalid("censoring rate must be positive"));
        }
        if !(self.tau0 > 0.0 && self.tau0 < self.tau) {
            return Err(Error::invalid("truncation bounds need 0 < tau0 < tau"));
        }
        if !(self.weibull_shape > 0.0 && self.weibull_scale > 0.0) {
            return Err(Error::invalid("Weibull parameters must be positive"));
        }
        if self.n < 2 {
            return Err(Error::invalid("sample size must be at least 2"));
        }
        for &v in &self.error_sd {
            if v > 0.0 {
                perturbed_error_sampler(self.error_kind, v)?;
            }
        }
        Ok(())
    }
}

/// Names `gamma1..gammaP` then `beta1..betaQ`.
pub fn parameter_names(n_gamma: usize, n_beta: usize) -> Vec<String> {
    (1..=n_gamma)
        .map(|j| format!("gamma{j}"))
        .chain((1..=n_beta).map(|j| format!("beta{j}")))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    /// Covariates with measurement error.
    pub observed: Dataset,
    /// Same records with the true covariates.
    pub latent: Dataset,
    pub cured: Vec<bool>,
}

/// Simulates one dataset. Latent quantities and measurement errors use
/// separate substreams of `key`, so the latent data do not depend on the
/// error settings.
pub fn generate(spec: &ScenarioSpec, key: StreamKey) -> Result<Generated> {
    spec.validate()?;
    let mut rng = key.child(Purpose::Latent, 0).rng();
    let (inc, lat) = spec.columns();
    let n = spec.n;
    let mut latent = Vec::with_capacity(n);
    let mut cured = Vec::with_capacity(n);
    for _ in 0..n {
        let cov: Vec<f64> = match spec.model {
            1 => vec![StandardNormal.sample(&mut rng)],
            2 => vec![rng.random_range(-1.0..1.0), bernoulli_half(&mut rng)],
            3 => {
                let x1 = rng.random_range(-1.0..1.0);
                let x2 = bernoulli_half(&mut rng);
                let z2: f64 = StandardNormal.sample(&mut rng);
                vec![x1, x2, 0.3 * z2]
            }
            4 => {
                let x: f64 = StandardNormal.sample(&mut rng);
                vec![x, rng.random_range(-1.0..1.0)]
            }
            _ => {
                let x: f64 = StandardNormal.sample(&mut rng);
                let e: f64 = StandardNormal.sample(&mut rng);
                vec![x, -x + 0.5 * e]
            }
        };
        let eta_x = spec.gamma[0]
            + inc
                .iter()
                .zip(&spec.gamma[1..])
                .map(|(&j, g)| g * cov[j])
                .sum::<f64>();
        let eta_z: f64 = lat.iter().zip(&spec.beta).map(|(&j, b)| b * cov[j]).sum();
        let uncured = rng.random::<f64>() < logistic(eta_x);
        let u: f64 = 1.0 - rng.random::<f64>();
        let t0 = (-u.ln() / (spec.weibull_scale * eta_z.exp())).powf(1.0 / spec.weibull_shape);
        let t = if uncured {
            t0.min(spec.tau0)
        } else {
            f64::INFINITY
        };
        let uc: f64 = 1.0 - rng.random::<f64>();
        let c = (-uc.ln() / spec.censor_rate).min(spec.tau);
        let (time, event) = if t <= c { (t, true) } else { (c, false) };
        latent.push(SurvivalRecord::new(time, event, cov)?);
        cured.push(!uncured);
    }
    let mut err_rng = key.child(Purpose::MeasurementError, 0).rng();
    let samplers: Vec<Option<ErrorSampler>> = spec
        .error_sd
        .iter()
        .map(|&v| {
            (v > 0.0)
                .then(|| perturbed_error_sampler(spec.error_kind, v))
                .transpose()
        })
        .collect::<Result<_>>()?;
    let observed = latent
        .iter()
        .map(|r| {
            let cov = r
                .covariates
                .iter()
                .zip(&samplers)
                .map(|(x, s)| match s {
                    Some(s) => x + s.sample(&mut err_rng),
                    None => *x,
                })
                .collect();
            SurvivalRecord::new(r.time, r.event, cov)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Generated {
        observed: Dataset::new(observed, spec.column_names())?,
        latent: Dataset::new(latent, spec.column_names())?,
        cured,
    })
}

fn bernoulli_half(rng: &mut Rng) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub parameter: String,
    pub bias: f64,
    pub variance: f64,
    pub mse: f64,
}

/// Bias, variance and MSE per parameter, stored unscaled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub parameters: Vec<ParameterSummary>,
    pub replicates: usize,
    pub failures: usize,
}

impl McSummary {
    pub fn get(&self, name: &str) -> Option<&ParameterSummary> {
        self.parameters.iter().find(|p| p.parameter == name)
    }
}

/// Summary statistics over replicates; the variance uses denominator `R`
/// so that `mse = bias^2 + variance`.
pub fn summarize(estimates: &[Vec<f64>], truth: &[f64], names: &[String]) -> Result<McSummary> {
    if estimates.len() < 2 {
        return Err(Error::invalid("at least two replicates are required"));
    }
    if names.len() != truth.len() || estimates.iter().any(|e| e.len() != truth.len()) {
        return Err(Error::invalid("estimate, truth and name lengths differ"));
    }
    let r = estimates.len() as f64;
    let parameters = truth
        .iter()
        .enumerate()
        .map(|(j, &t)| {
            let mean = estimates.iter().map(|e| e[j]).sum::<f64>() / r;
            let variance = estimates.iter().map(|e| (e[j] - mean).powi(2)).sum::<f64>() / r;
            let bias = mean - t;
            ParameterSummary {
                parameter: names[j].clone(),
                bias,
                variance,
                mse: bias * bias + variance,
            }
        })
        .collect();
    Ok(McSummary {
        parameters,
        replicates: estimates.len(),
        failures: 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    NaiveMle,
    NaivePresmooth,
    SimexMle,
    SimexPresmooth,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::NaiveMle,
        Method::NaivePresmooth,
        Method::SimexMle,
        Method::SimexPresmooth,
    ];

    pub fn estimator(&self) -> Estimator {
        match self {
            Method::NaiveMle | Method::SimexMle => Estimator::Mle,
            _ => Estimator::Presmooth,
        }
    }

    pub fn is_simex(&self) -> bool {
        matches!(self, Method::SimexMle | Method::SimexPresmooth)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::NaiveMle => "naive-mle",
            Method::NaivePresmooth => "naive-presmooth",
            Method::SimexMle => "simex-mle",
            Method::SimexPresmooth => "simex-presmooth",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Mle,
    Presmooth,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StudyOptions {
    pub em: EmOptions,
    pub presmooth: PresmoothOptions,
    /// The seed field is replaced by a per-replicate substream.
    pub simex: SimexOptions,
}

/// Estimates from one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateOutcome {
    pub naive: Result<Vec<f64>, String>,
    pub simex: Option<Result<Vec<f64>, String>>,
}

fn fitter_for(
    estimator: Estimator,
    data: &Dataset,
    layout: &ModelLayout,
    opts: &StudyOptions,
) -> Result<Box<dyn CureFitter>> {
    Ok(match estimator {
        Estimator::Mle => Box::new(MleFitter { opts: opts.em }),
        Estimator::Presmooth => {
            let mut p = opts.presmooth.clone();
            p.em = opts.em;
            Box::new(PresmoothFitter::new(data, layout, &p)?)
        }
    })
}

/// Runs replicate `index` of a study. With `with_simex` the naive estimate
/// is the SIMEX run's uncontaminated fit when `lambda = 0` is a level.
pub fn run_replicate(
    spec: &ScenarioSpec,
    estimator: Estimator,
    with_simex: bool,
    opts: &StudyOptions,
    seed: u64,
    index: usize,
) -> ReplicateOutcome {
    let key = StreamKey::new(seed).child(Purpose::McReplicate, index as u64);
    let prepared = generate(spec, key).and_then(|g| {
        let layout = spec.layout()?;
        let fitter = fitter_for(estimator, &g.observed, &layout, opts)?;
        Ok((g, layout, fitter))
    });
    let (g, layout, fitter) = match prepared {
        Ok(p) => p,
        Err(e) => {
            let msg = e.to_string();
            return ReplicateOutcome {
                naive: Err(msg.clone()),
                simex: with_simex.then_some(Err(msg)),
            };
        }
    };
    let params = |f: &crate::model::CureFit| f.parameters();
    if !with_simex {
        return ReplicateOutcome {
            naive: fitter
                .fit(&g.observed, &layout)
                .map(|f| params(&f))
                .map_err(|e| e.to_string()),
            simex: None,
        };
    }
    let mut sopts = opts.simex.clone();
    sopts.seed = key.child(Purpose::Simex, 0).value();
    let res = run_simex(&g.observed, &layout, fitter.as_ref(), &sopts);
    let naive = match res.as_ref().ok().and_then(|r| r.naive.as_ref()) {
        Some(f) => Ok(params(f)),
        None => fitter
            .fit(&g.observed, &layout)
            .map(|f| params(&f))
            .map_err(|e| e.to_string()),
    };
    ReplicateOutcome {
        naive,
        simex: Some(res.map(|r| r.parameters()).map_err(|e| e.to_string())),
    }
}

/// Naive and, optionally, SIMEX summaries of one study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub naive: McSummary,
    pub simex: Option<McSummary>,
}

fn summarize_outcomes(
    spec: &ScenarioSpec,
    results: Vec<&Result<Vec<f64>, String>>,
) -> Result<McSummary> {
    let total = results.len();
    let ok: Vec<Vec<f64>> = results
        .iter()
        .filter_map(|r| r.as_ref().ok().cloned())
        .collect();
    let failures = total - ok.len();
    if failures as f64 > MAX_REPLICATE_FAILURE_SHARE * total as f64 {
        let why = results
            .iter()
            .find_map(|r| r.as_ref().err().cloned())
            .unwrap_or_default();
        return Err(Error::Estimation(format!(
            "{failures} of {total} replicates failed (first failure: {why})"
        )));
    }
    let mut s = summarize(&ok, &spec.truth(), &spec.parameter_names())?;
    s.failures = failures;
    Ok(s)
}

/// Runs `replicates` replicates, in parallel on the current rayon pool.
/// The result does not depend on the number of threads.
pub fn run_study_both(
    spec: &ScenarioSpec,
    estimator: Estimator,
    with_simex: bool,
    replicates: usize,
    opts: &StudyOptions,
    seed: u64,
) -> Result<StudyResult> {
    spec.validate()?;
    if with_simex {
        opts.simex.validate()?;
    }
    let outcomes: Vec<ReplicateOutcome> = (0..replicates)
        .into_par_iter()
        .map(|i| run_replicate(spec, estimator, with_simex, opts, seed, i))
        .collect();
    let naive = summarize_outcomes(spec, outcomes.iter().map(|o| &o.naive).collect())?;
    let simex = if with_simex {
        Some(summarize_outcomes(
            spec,
            outcomes.iter().filter_map(|o| o.simex.as_ref()).collect(),
        )?)
    } else {
        None
    };
    Ok(StudyResult { naive, simex })
}

/// Monte Carlo summary of one method.
pub fn run_study(
    spec: &ScenarioSpec,
    method: Method,
    replicates: usize,
    opts: &StudyOptions,
    seed: u64,
) -> Result<McSummary> {
    let r = run_study_both(
        spec,
        method.estimator(),
        method.is_simex(),
        replicates,
        opts,
        seed,
    )?;
    Ok(if method.is_simex() {
        r.simex.expect("requested")
    } else {
        r.naive
    })
}
