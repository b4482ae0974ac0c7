//! Presmoothed estimation of the cure model.
//!
//! A kernel-weighted product-limit (Beran) estimator gives a nonparametric
//! uncure probability `1 - S(tau0 | x_i)` for every subject. The incidence
//! is fitted to these values by a Bernoulli quasi-likelihood without any
//! reference to the latency model, and the latency is then estimated by
//! EM with the incidence held fixed.
//!
//! Kernel weights use the single continuous incidence covariate after
//! standardization. Other incidence covariates are treated as discrete and
//! matched exactly. A column counts as continuous when it takes more than
//! [`CONTINUOUS_THRESHOLD`] distinct values.
//!
//! The bandwidth criterion and the quasi-likelihood are reconstructions;
//! other presmoothing implementations may choose differently.

use serde::{Deserialize, Serialize};

use crate::em::{fit_latency_given_incidence, m_step_incidence, EmOptions, UncureWeights};
use crate::error::{Error, Result};
use crate::model::{CureFit, Dataset, ModelLayout};

/// Columns with more distinct values than this are smoothed over.
pub const CONTINUOUS_THRESHOLD: usize = 10;

/// Largest bandwidth the cross-validation may return.
pub const MAX_BANDWIDTH: f64 = 2.0;

const PROB_CLAMP: f64 = 1e-6;
const CV_TIME_POINTS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    #[default]
    Epanechnikov,
    Uniform,
}

impl Kernel {
    pub fn weight(&self, u: f64) -> f64 {
        if u.abs() > 1.0 {
            return 0.0;
        }
        match self {
            Kernel::Epanechnikov => 0.75 * (1.0 - u * u),
            Kernel::Uniform => 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bandwidth {
    /// Chosen by leave-one-out cross-validation over the grid.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresmoothOptions {
    pub bandwidth: Bandwidth,
    pub bandwidth_grid: Vec<f64>,
    pub kernel: Kernel,
    pub em: EmOptions,
}

impl Default for PresmoothOptions {
    fn default() -> Self {
        PresmoothOptions {
            bandwidth: Bandwidth::Auto,
            bandwidth_grid: default_grid(),
            kernel: Kernel::Epanechnikov,
            em: EmOptions::default(),
        }
    }
}

impl PresmoothOptions {
    /// Replaces an automatic bandwidth by the cross-validated one for `data`,
    /// so that later fits on contaminated copies reuse it.
    pub fn resolved(&self, data: &Dataset, layout: &ModelLayout) -> Result<PresmoothOptions> {
        let mut out = self.clone();
        if out.bandwidth == Bandwidth::Auto {
            out.bandwidth = Bandwidth::Fixed(cv_bandwidth(
                data,
                layout,
                &self.bandwidth_grid,
                self.kernel,
            )?);
        }
        Ok(out)
    }
}

/// 0.1, 0.2, ..., 2.0.
pub fn default_grid() -> Vec<f64> {
    (1..=20).map(|k| k as f64 / 10.0).collect()
}

/// How the incidence covariates enter the smoother.
#[derive(Debug, Clone)]
struct SmoothingDesign {
    /// Standardized continuous covariate, if any.
    continuous: Option<Vec<f64>>,
    /// Group label per record from exact matching of discrete covariates.
    group: Vec<usize>,
}

fn distinct_count(values: &[f64]) -> usize {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v.len()
}

fn standardize(values: &[f64]) -> Result<Vec<f64>> {
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    if !(sd > 0.0) || !sd.is_finite() {
        return Err(Error::invalid("continuous covariate has zero spread"));
    }
    Ok(values.iter().map(|x| (x - m) / sd).collect())
}

impl SmoothingDesign {
    fn new(data: &Dataset, layout: &ModelLayout) -> Result<SmoothingDesign> {
        layout.check(data)?;
        let mut continuous = None;
        let mut discrete = Vec::new();
        for &j in &layout.incidence {
            let col = data.column(j);
            if distinct_count(&col) > CONTINUOUS_THRESHOLD {
                if continuous.is_some() {
                    return Err(Error::invalid(
                        "presmoothing supports a single continuous incidence covariate",
                    ));
                }
                continuous = Some(standardize(&col)?);
            } else {
                discrete.push(col);
            }
        }
        let n = data.len();
        let mut keys: Vec<Vec<u64>> = (0..n)
            .map(|i| discrete.iter().map(|c| c[i].to_bits()).collect())
            .collect();
        let mut uniq = keys.clone();
        uniq.sort();
        uniq.dedup();
        let group = keys
            .iter_mut()
            .map(|k| uniq.binary_search(k).expect("key present"))
            .collect();
        Ok(SmoothingDesign { continuous, group })
    }

    fn weight(&self, kernel: Kernel, i: usize, x0: Option<f64>, group0: usize, h: f64) -> f64 {
        if self.group[i] != group0 {
            return 0.0;
        }
        match (&self.continuous, x0) {
            (Some(c), Some(x0)) => kernel.weight((c[i] - x0) / h),
            _ => 1.0,
        }
    }
}

/// Records sorted by time, with events before censorings at ties.
fn time_order(data: &Dataset) -> Vec<usize> {
    let recs = data.records();
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by(|&a, &b| {
        recs[a]
            .time
            .total_cmp(&recs[b].time)
            .then(recs[b].event.cmp(&recs[a].event))
    });
    order
}

/// Weighted product-limit survival at `t` with record weights `w`.
/// `order` sorts the records by time.
fn product_limit(data: &Dataset, order: &[usize], w: &[f64], t: f64) -> f64 {
    let recs = data.records();
    let mut at_risk: f64 = w.iter().sum();
    let mut surv = 1.0;
    let mut k = 0;
    while k < order.len() && recs[order[k]].time <= t {
        let time = recs[order[k]].time;
        let mut died = 0.0;
        let mut left = 0.0;
        while k < order.len() && recs[order[k]].time == time {
            let i = order[k];
            if recs[i].event {
                died += w[i];
            }
            left += w[i];
            k += 1;
        }
        if at_risk > 0.0 && died > 0.0 {
            surv *= 1.0 - died / at_risk;
        }
        at_risk -= left;
    }
    surv.clamp(0.0, 1.0)
}

/// Beran estimator of `P(T > t | x = x0)` smoothing over covariate
/// `column`, which is standardized by its sample mean and deviation before
/// the kernel is applied with bandwidth `h`.
pub fn beran_survival(
    data: &Dataset,
    column: usize,
    x0: f64,
    t: f64,
    h: f64,
    kernel: Kernel,
) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::invalid("bandwidth must be positive"));
    }
    if column >= data.dim() {
        return Err(Error::invalid("covariate index out of range"));
    }
    if data.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let col = data.column(column);
    let n = col.len() as f64;
    let m = col.iter().sum::<f64>() / n;
    let sd = (col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    let w: Vec<f64> = col
        .iter()
        .map(|x| kernel.weight((x - x0) / sd / h))
        .collect();
    if w.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateWindow { x0, bandwidth: h });
    }
    Ok(product_limit(data, &time_order(data), &w, t))
}

/// Presmoothed uncure probabilities `1 - S(tau0 | x_i)`, clamped away from
/// 0 and 1.
pub fn presmoothed_uncure(
    data: &Dataset,
    layout: &ModelLayout,
    h: f64,
    kernel: Kernel,
) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::invalid("bandwidth must be positive"));
    }
    let tau0 = data
        .last_event_time()
        .ok_or_else(|| Error::invalid("at least one event is required"))?;
    let design = SmoothingDesign::new(data, layout)?;
    let order = time_order(data);
    let n = data.len();
    let mut w = vec![0.0; n];
    (0..n)
        .map(|i| {
            let x0 = design.continuous.as_ref().map(|c| c[i]);
            for (j, wj) in w.iter_mut().enumerate() {
                *wj = design.weight(kernel, j, x0, design.group[i], h);
            }
            // the subject itself always has positive weight
            let s = product_limit(data, &order, &w, tau0);
            Ok((1.0 - s).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))
        })
        .collect()
}

/// Leave-one-out cross-validated bandwidth for the conditional distribution
/// `H(t | x) = P(Y <= t | x)`.
///
/// The criterion is the squared error between `1{Y_i <= t}` and the
/// Nadaraya-Watson estimate of `H(t | x_i)` computed without subject `i`,
/// summed over subjects and over 50 equally spaced times up to the largest
/// uncensored observation. The result never exceeds [`MAX_BANDWIDTH`].
pub fn cv_bandwidth(
    data: &Dataset,
    layout: &ModelLayout,
    grid: &[f64],
    kernel: Kernel,
) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::invalid("bandwidth grid is empty"));
    }
    if grid.iter().any(|h| !(*h > 0.0) || !h.is_finite()) {
        return Err(Error::invalid("bandwidths must be positive and finite"));
    }
    if grid.len() == 1 {
        return Ok(grid[0].min(MAX_BANDWIDTH));
    }
    let design = SmoothingDesign::new(data, layout)?;
    let ymax = data
        .last_event_time()
        .ok_or_else(|| Error::invalid("at least one event is required"))?;
    let times: Vec<f64> = (1..=CV_TIME_POINTS)
        .map(|g| ymax * g as f64 / CV_TIME_POINTS as f64)
        .collect();
    let y = data.times();
    let n = y.len();
    // first grid index whose time is >= y_j; indicator 1{y_j <= t_g} holds for g >= it
    let first: Vec<usize> = y
        .iter()
        .map(|&yj| times.partition_point(|&t| t < yj))
        .collect();

    // leave-one-out marginal distribution, the fallback for empty windows
    let mut marginal_counts = vec![0.0; CV_TIME_POINTS + 1];
    for &f in &first {
        marginal_counts[f] += 1.0;
    }

    let scores: Vec<f64> = grid
        .iter()
        .map(|&h| {
            let mut score = 0.0;
            let mut bucket = vec![0.0; CV_TIME_POINTS + 1];
            for i in 0..n {
                bucket.iter_mut().for_each(|b| *b = 0.0);
                let x0 = design.continuous.as_ref().map(|c| c[i]);
                let mut total = 0.0;
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    let wj = design.weight(kernel, j, x0, design.group[i], h);
                    if wj > 0.0 {
                        bucket[first[j]] += wj;
                        total += wj;
                    }
                }
                let (counts, denom) = if total > 0.0 {
                    (&bucket, total)
                } else {
                    bucket.copy_from_slice(&marginal_counts);
                    bucket[first[i]] -= 1.0;
                    (&bucket, (n - 1) as f64)
                };
                let mut cum = 0.0;
                for (g, c) in counts.iter().take(CV_TIME_POINTS).enumerate() {
                    cum += c;
                    let est = if denom > 0.0 { cum / denom } else { 0.0 };
                    let obs = if g >= first[i] { 1.0 } else { 0.0 };
                    score += (obs - est).powi(2);
                }
            }
            score
        })
        .collect();

    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let h = if hi - lo <= 1e-12 * (1.0 + lo.abs()) {
        grid[grid.len() / 2]
    } else {
        let best = scores
            .iter()
            .position(|&s| s == lo)
            .expect("minimum is attained");
        grid[best]
    };
    Ok(h.min(MAX_BANDWIDTH))
}

/// Fits the incidence to given uncure probabilities and the latency by EM
/// with the incidence frozen.
pub fn fit_presmooth_from_probabilities(
    data: &Dataset,
    layout: &ModelLayout,
    uncure: &[f64],
    em: &EmOptions,
) -> Result<CureFit> {
    let w = UncureWeights(
        uncure
            .iter()
            .map(|p| p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))
            .collect(),
    );
    let inc = m_step_incidence(data, layout, &w, &vec![0.0; layout.n_gamma()], em)?;
    let mut fit = fit_latency_given_incidence(data, layout, &inc.gamma, em)?;
    if inc.diverged {
        fit.incidence_diverged = true;
        fit.converged = false;
    }
    Ok(fit)
}

/// Presmoothing estimator of the mixture cure model.
pub fn fit_presmooth(
    data: &Dataset,
    layout: &ModelLayout,
    opts: &PresmoothOptions,
) -> Result<CureFit> {
    let h = match opts.bandwidth {
        Bandwidth::Fixed(h) => h,
        Bandwidth::Auto => cv_bandwidth(data, layout, &opts.bandwidth_grid, opts.kernel)?,
    };
    let uncure = presmoothed_uncure(data, layout, h, opts.kernel)?;
    fit_presmooth_from_probabilities(data, layout, &uncure, &opts.em)
}
