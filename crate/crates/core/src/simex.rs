//! Simulation-extrapolation correction for covariate measurement error.
//!
//! For each noise level `lambda` the observed covariates are contaminated
//! `B` times as `W + (lambda V)^{1/2} U` with `U` standard normal, the model
//! is refitted on every copy and the fits are averaged. A polynomial in
//! `lambda` is then fitted by least squares to each averaged coordinate and
//! evaluated at `lambda = -1`, the level at which the total error variance
//! vanishes. The baseline cumulative hazard is extrapolated pointwise at the
//! original event times and isotonized when the result is not monotone.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::{fit_mle, EmOptions};
use crate::error::{Error, Result};
use crate::linalg::{least_squares, psd_sqrt};
use crate::model::{CureFit, Dataset, ModelLayout, StepFunction};
use crate::presmooth::{fit_presmooth, PresmoothOptions};
use crate::rng::{Purpose, Rng, StreamKey};

/// Share of failed cells at a single level above which the run aborts.
pub const MAX_CELL_FAILURE_SHARE: f64 = 0.2;

/// An estimator that SIMEX can rerun on contaminated data.
pub trait CureFitter: Sync {
    fn fit(&self, data: &Dataset, layout: &ModelLayout) -> Result<CureFit>;

    /// Fit for a contaminated dataset at noise level `lambda`. Real
    /// estimators ignore the level.
    fn fit_at_level(&self, data: &Dataset, layout: &ModelLayout, lambda: f64) -> Result<CureFit> {
        let _ = lambda;
        self.fit(data, layout)
    }
}

/// EM maximum likelihood. Separated incidence fits count as failures.
#[derive(Debug, Clone, Default)]
pub struct MleFitter {
    pub opts: EmOptions,
}

impl CureFitter for MleFitter {
    fn fit(&self, data: &Dataset, layout: &ModelLayout) -> Result<CureFit> {
        let fit = fit_mle(data, layout, &self.opts)?;
        if fit.incidence_diverged {
            return Err(Error::Estimation("incidence fit separated".into()));
        }
        Ok(fit)
    }
}

/// Presmoothing estimator. Build it with [`PresmoothFitter::new`] on the
/// original data so the cross-validated bandwidth is chosen once.
#[derive(Debug, Clone)]
pub struct PresmoothFitter {
    pub opts: PresmoothOptions,
}

impl PresmoothFitter {
    pub fn new(data: &Dataset, layout: &ModelLayout, opts: &PresmoothOptions) -> Result<Self> {
        Ok(PresmoothFitter {
            opts: opts.resolved(data, layout)?,
        })
    }
}

impl CureFitter for PresmoothFitter {
    fn fit(&self, data: &Dataset, layout: &ModelLayout) -> Result<CureFit> {
        let fit = fit_presmooth(data, layout, &self.opts)?;
        if fit.incidence_diverged {
            return Err(Error::Estimation("incidence fit separated".into()));
        }
        Ok(fit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Extrapolant {
    Linear,
    #[default]
    Quadratic,
    Cubic,
}

impl Extrapolant {
    pub fn degree(&self) -> usize {
        match self {
            Extrapolant::Linear => 1,
            Extrapolant::Quadratic => 2,
            Extrapolant::Cubic => 3,
        }
    }
}

impl std::str::FromStr for Extrapolant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Extrapolant::Linear),
            "quadratic" => Ok(Extrapolant::Quadratic),
            "cubic" => Ok(Extrapolant::Cubic),
            _ => Err(Error::invalid(format!("unknown extrapolant {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimexOptions {
    pub lambdas: Vec<f64>,
    #[serde(rename = "B")]
    pub b: usize,
    pub extrapolant: Extrapolant,
    pub isotonize: bool,
    pub seed: u64,
}

impl Default for SimexOptions {
    fn default() -> Self {
        SimexOptions {
            lambdas: vec![0.0, 0.5, 1.0, 1.5, 2.0],
            b: 50,
            extrapolant: Extrapolant::Quadratic,
            isotonize: true,
            seed: 0,
        }
    }
}

impl SimexOptions {
    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() {
            return Err(Error::invalid("at least one lambda is required"));
        }
        if self.lambdas.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::invalid("lambdas must be finite and nonnegative"));
        }
        if self.lambdas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("lambdas must be strictly increasing"));
        }
        if self.b == 0 {
            return Err(Error::invalid("B must be at least 1"));
        }
        if self.lambdas.len() < self.extrapolant.degree() + 1 {
            return Err(Error::invalid(format!(
                "{} lambdas cannot determine a degree {} extrapolant",
                self.lambdas.len(),
                self.extrapolant.degree()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragedFit {
    pub lambda: f64,
    pub gamma_bar: Vec<f64>,
    pub beta_bar: Vec<f64>,
    pub lambda_bar: StepFunction,
    /// Number of fits that went into the average.
    pub fits: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimexResult {
    pub per_lambda: Vec<AveragedFit>,
    /// Extrapolant coefficients for each of `gamma` then `beta`.
    pub extrap_coeffs: Vec<Vec<f64>>,
    /// Extrapolant coefficients for the baseline at each event time.
    pub baseline_coeffs: Vec<Vec<f64>>,
    pub gamma_simex: Vec<f64>,
    pub beta_simex: Vec<f64>,
    pub baseline_simex: StepFunction,
    pub baseline_was_monotone: bool,
    /// Failed cells per level.
    pub failures: Vec<usize>,
    /// The fit on the uncontaminated data, when `lambda = 0` is a level.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub naive: Option<CureFit>,
}

impl SimexResult {
    pub fn parameters(&self) -> Vec<f64> {
        self.gamma_simex
            .iter()
            .chain(&self.beta_simex)
            .copied()
            .collect()
    }
}

/// Adds `(lambda V)^{1/2} U` to every covariate vector.
pub fn contaminate(
    data: &Dataset,
    v: &DMatrix<f64>,
    lambda: f64,
    rng: &mut Rng,
) -> Result<Dataset> {
    if v.nrows() != data.dim() {
        return Err(Error::invalid(
            "covariance dimension does not match the covariates",
        ));
    }
    let root = psd_sqrt(v)?;
    contaminate_with_root(data, &root, lambda, rng)
}

pub(crate) fn contaminate_with_root(
    data: &Dataset,
    root: &DMatrix<f64>,
    lambda: f64,
    rng: &mut Rng,
) -> Result<Dataset> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::invalid("lambda must be finite and nonnegative"));
    }
    let d = data.dim();
    let s = lambda.sqrt();
    let mut u = vec![0.0; d];
    let covs = data
        .records()
        .iter()
        .map(|r| {
            for x in u.iter_mut() {
                *x = StandardNormal.sample(rng);
            }
            (0..d)
                .map(|i| {
                    let shift: f64 = (0..d).map(|j| root[(i, j)] * u[j]).sum();
                    r.covariates[i] + s * shift
                })
                .collect()
        })
        .collect();
    Ok(data.with_covariates(covs))
}

/// Coordinatewise mean of fits sharing the same event-time grid.
pub fn average_fits(lambda: f64, fits: &[CureFit]) -> Result<AveragedFit> {
    let first = fits
        .first()
        .ok_or_else(|| Error::invalid("no fits to average"))?;
    let k = fits.len() as f64;
    // deviations from the first fit, so identical fits average exactly
    let mut gamma = vec![0.0; first.gamma.len()];
    let mut beta = vec![0.0; first.beta.len()];
    let mut base = vec![0.0; first.baseline.len()];
    for f in fits {
        if f.gamma.len() != gamma.len() || f.beta.len() != beta.len() {
            return Err(Error::invalid("fits have different dimensions"));
        }
        if f.baseline.times() != first.baseline.times() {
            return Err(Error::invalid("fits have different event-time grids"));
        }
        let acc = |sum: &mut [f64], xs: &[f64], origin: &[f64]| {
            for ((a, x), o) in sum.iter_mut().zip(xs).zip(origin) {
                *a += x - o;
            }
        };
        acc(&mut gamma, &f.gamma, &first.gamma);
        acc(&mut beta, &f.beta, &first.beta);
        acc(&mut base, f.baseline.values(), first.baseline.values());
    }
    let mean = |dev: Vec<f64>, origin: &[f64]| -> Vec<f64> {
        dev.into_iter()
            .zip(origin)
            .map(|(d, o)| o + d / k)
            .collect()
    };
    Ok(AveragedFit {
        lambda,
        gamma_bar: mean(gamma, &first.gamma),
        beta_bar: mean(beta, &first.beta),
        lambda_bar: first
            .baseline
            .with_values(mean(base, first.baseline.values())),
        fits: fits.len(),
    })
}

/// Least-squares polynomial coefficients `(a_1, a_2, ...)` of
/// `a_1 + a_2 lambda + a_3 lambda^2 + ...`.
pub fn fit_extrapolant(lambdas: &[f64], values: &[f64], kind: Extrapolant) -> Result<Vec<f64>> {
    if lambdas.len() != values.len() {
        return Err(Error::invalid("lambdas and values differ in length"));
    }
    let k = kind.degree() + 1;
    if lambdas.len() < k {
        return Err(Error::invalid("too few lambdas for the extrapolant"));
    }
    // fit deviations from the first value; constant input then gives an
    // exactly constant polynomial
    let origin = values[0];
    let shifted: Vec<f64> = values.iter().map(|v| v - origin).collect();
    let design = DMatrix::from_fn(lambdas.len(), k, |i, j| lambdas[i].powi(j as i32));
    let mut coeffs = least_squares(&design, &shifted)?;
    coeffs[0] += origin;
    Ok(coeffs)
}

/// Value of the fitted polynomial at `lambda = -1`.
pub fn extrapolate_minus1(coeffs: &[f64]) -> f64 {
    coeffs
        .iter()
        .enumerate()
        .map(|(j, a)| if j % 2 == 0 { *a } else { -*a })
        .sum()
}

/// Pool-adjacent-violators: the non-decreasing least-squares fit.
pub fn pava(values: &[f64]) -> Vec<f64> {
    // blocks of (mean, size)
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(values.len());
    for &v in values {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (m2, n2) = blocks[blocks.len() - 1];
            let (m1, n1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.truncate(blocks.len() - 2);
            let n = n1 + n2;
            blocks.push(((m1 * n1 as f64 + m2 * n2 as f64) / n as f64, n));
        }
    }
    blocks
        .into_iter()
        .flat_map(|(m, n)| std::iter::repeat_n(m, n))
        .collect()
}

/// Runs SIMEX with noise covariance `layout.error_cov`.
pub fn run_simex(
    data: &Dataset,
    layout: &ModelLayout,
    fitter: &dyn CureFitter,
    opts: &SimexOptions,
) -> Result<SimexResult> {
    opts.validate()?;
    layout.check(data)?;
    let root = psd_sqrt(&layout.error_cov)?;
    let master = StreamKey::new(opts.seed);
    let b = opts.b;

    // The uncontaminated data are the same for every replicate; fit once.
    let zero_fit =
        (opts.lambdas.first() == Some(&0.0)).then(|| fitter.fit_at_level(data, layout, 0.0));

    let cells: Vec<Result<CureFit>> = (0..opts.lambdas.len() * b)
        .into_par_iter()
        .map(|cell| {
            let (level, rep) = (cell / b, cell % b);
            let lambda = opts.lambdas[level];
            if lambda == 0.0 {
                return match &zero_fit {
                    Some(Ok(f)) => Ok(f.clone()),
                    Some(Err(e)) => Err(Error::Estimation(e.to_string())),
                    None => unreachable!("zero level is first"),
                };
            }
            let mut rng = master
                .child(Purpose::SimexLevel, level as u64)
                .child(Purpose::SimexReplicate, rep as u64)
                .rng();
            let noisy = contaminate_with_root(data, &root, lambda, &mut rng)?;
            fitter.fit_at_level(&noisy, layout, lambda)
        })
        .collect();

    let mut per_lambda = Vec::with_capacity(opts.lambdas.len());
    let mut failures = Vec::with_capacity(opts.lambdas.len());
    for (level, chunk) in cells.chunks(b).enumerate() {
        let lambda = opts.lambdas[level];
        let ok: Vec<CureFit> = chunk
            .iter()
            .filter_map(|r| r.as_ref().ok().cloned())
            .collect();
        let failed = b - ok.len();
        if failed as f64 > MAX_CELL_FAILURE_SHARE * b as f64 || ok.is_empty() {
            let why = chunk
                .iter()
                .find_map(|r| r.as_ref().err().map(|e| e.to_string()))
                .unwrap_or_default();
            return Err(Error::Estimation(format!(
                "{failed} of {b} fits failed at lambda = {lambda} (first failure: {why})"
            )));
        }
        failures.push(failed);
        per_lambda.push(average_fits(lambda, &ok)?);
    }

    let params: Vec<Vec<f64>> = per_lambda
        .iter()
        .map(|a| a.gamma_bar.iter().chain(&a.beta_bar).copied().collect())
        .collect();
    let n_params = params[0].len();
    let n_gamma = per_lambda[0].gamma_bar.len();
    let extrap_coeffs = (0..n_params)
        .map(|j| {
            let ys: Vec<f64> = params.iter().map(|p| p[j]).collect();
            fit_extrapolant(&opts.lambdas, &ys, opts.extrapolant)
        })
        .collect::<Result<Vec<_>>>()?;
    let extrapolated: Vec<f64> = extrap_coeffs
        .iter()
        .map(|c| extrapolate_minus1(c))
        .collect();

    let grid = &per_lambda[0].lambda_bar;
    let baseline_coeffs = (0..grid.len())
        .map(|t| {
            let ys: Vec<f64> = per_lambda
                .iter()
                .map(|a| a.lambda_bar.values()[t])
                .collect();
            fit_extrapolant(&opts.lambdas, &ys, opts.extrapolant)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut base: Vec<f64> = baseline_coeffs
        .iter()
        .map(|c| extrapolate_minus1(c))
        .collect();
    if extrapolated.iter().chain(&base).any(|v| !v.is_finite()) {
        return Err(Error::Estimation(
            "extrapolated values are not finite".into(),
        ));
    }
    let monotone = base.windows(2).all(|w| w[0] <= w[1]);
    if !monotone && opts.isotonize {
        base = pava(&base);
    }

    Ok(SimexResult {
        baseline_simex: grid.with_values(base),
        per_lambda,
        gamma_simex: extrapolated[..n_gamma].to_vec(),
        beta_simex: extrapolated[n_gamma..].to_vec(),
        extrap_coeffs,
        baseline_coeffs,
        baseline_was_monotone: monotone,
        failures,
        naive: zero_fit.and_then(|r| r.ok()),
    })
}
