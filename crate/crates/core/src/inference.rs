//! Bootstrap standard errors and Wald tests.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::model::{Dataset, ModelLayout};
use crate::rng::{Purpose, StreamKey};
use crate::simex::{run_simex, CureFitter, SimexOptions};

/// Share of failed refits above which the bootstrap aborts.
pub const MAX_BOOTSTRAP_FAILURE_SHARE: f64 = 0.2;

/// A parameter estimator that can be rerun on resampled data. `key` is a
/// fresh substream for estimators that need randomness.
pub trait Estimate: Sync {
    fn estimate(&self, data: &Dataset, layout: &ModelLayout, key: StreamKey) -> Result<Vec<f64>>;
}

impl<F> Estimate for F
where
    F: Fn(&Dataset, &ModelLayout, StreamKey) -> Result<Vec<f64>> + Sync,
{
    fn estimate(&self, data: &Dataset, layout: &ModelLayout, key: StreamKey) -> Result<Vec<f64>> {
        self(data, layout, key)
    }
}

/// `(gamma, beta)` of a cure model fitter.
pub struct FitterEstimate<'a>(pub &'a dyn CureFitter);

impl Estimate for FitterEstimate<'_> {
    fn estimate(&self, data: &Dataset, layout: &ModelLayout, _key: StreamKey) -> Result<Vec<f64>> {
        self.0.fit(data, layout).map(|f| f.parameters())
    }
}

/// SIMEX-corrected `(gamma, beta)`, rerunning the whole SIMEX procedure on
/// each resample with its own seed.
pub struct SimexEstimate<'a> {
    pub fitter: &'a dyn CureFitter,
    pub opts: SimexOptions,
}

impl Estimate for SimexEstimate<'_> {
    fn estimate(&self, data: &Dataset, layout: &ModelLayout, key: StreamKey) -> Result<Vec<f64>> {
        let mut opts = self.opts.clone();
        opts.seed = key.child(Purpose::Simex, 0).value();
        run_simex(data, layout, self.fitter, &opts).map(|r| r.parameters())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub estimates: Vec<f64>,
    pub sd: Vec<f64>,
    pub p_values: Vec<f64>,
    pub n_boot: usize,
    pub n_failed: usize,
}

/// Case-resampling bootstrap. Estimates come from the original data; the
/// standard deviations use denominator `successes - 1`. Resampling draws
/// from the records in canonical order, so the result does not depend on
/// how the input happens to be sorted.
pub fn bootstrap_sd(
    data: &Dataset,
    layout: &ModelLayout,
    estimator: &dyn Estimate,
    n_boot: usize,
    seed: u64,
) -> Result<BootstrapReport> {
    if n_boot < 2 {
        return Err(Error::invalid(
            "at least two bootstrap samples are required",
        ));
    }
    if data.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let data = &data.subset(&data.canonical_order());
    let root = StreamKey::new(seed);
    let estimates = estimator.estimate(data, layout, root)?;
    let n = data.len();
    let draws: Vec<Result<Vec<f64>>> = (0..n_boot)
        .into_par_iter()
        .map(|b| {
            let key = root.child(Purpose::Bootstrap, b as u64);
            let mut rng = key.rng();
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let sample = data.subset(&idx);
            let est = estimator.estimate(&sample, layout, key)?;
            if est.len() != estimates.len() || est.iter().any(|v| !v.is_finite()) {
                return Err(Error::Estimation("bootstrap estimate is malformed".into()));
            }
            Ok(est)
        })
        .collect();
    let ok: Vec<&Vec<f64>> = draws.iter().filter_map(|r| r.as_ref().ok()).collect();
    let n_failed = n_boot - ok.len();
    if n_failed as f64 > MAX_BOOTSTRAP_FAILURE_SHARE * n_boot as f64 || ok.len() < 2 {
        let why = draws
            .iter()
            .find_map(|r| r.as_ref().err().map(|e| e.to_string()))
            .unwrap_or_default();
        return Err(Error::Estimation(format!(
            "{n_failed} of {n_boot} bootstrap refits failed (first failure: {why})"
        )));
    }
    let k = ok.len() as f64;
    let sd: Vec<f64> = (0..estimates.len())
        .map(|j| {
            let m = ok.iter().map(|e| e[j]).sum::<f64>() / k;
            (ok.iter().map(|e| (e[j] - m).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
        })
        .collect();
    let p_values = wald_pvalues(&estimates, &sd)?;
    Ok(BootstrapReport {
        estimates,
        sd,
        p_values,
        n_boot,
        n_failed,
    })
}

/// Two-sided normal p-values `2 (1 - Phi(|est| / sd))`.
///
/// A zero standard deviation gives p = 0 for a nonzero estimate and p = 1
/// for a zero estimate.
pub fn wald_pvalues(estimates: &[f64], sd: &[f64]) -> Result<Vec<f64>> {
    if estimates.len() != sd.len() {
        return Err(Error::invalid(
            "estimates and standard deviations differ in length",
        ));
    }
    estimates
        .iter()
        .zip(sd)
        .map(|(&e, &s)| {
            if !(s >= 0.0) || !e.is_finite() {
                return Err(Error::invalid(
                    "standard deviations must be nonnegative and estimates finite",
                ));
            }
            Ok(if s == 0.0 {
                if e == 0.0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                erfc((e / s).abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
            })
        })
        .collect()
}
