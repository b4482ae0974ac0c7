//! Maximum likelihood for the logistic/Cox mixture cure model via EM.
//!
//! The latent uncured status is replaced in the E-step by its posterior
//! mean
//!
//! ```text
//! w_i = 1                                        if the event was observed
//! w_i = phi_i S_u(y_i) / (1 - phi_i + phi_i S_u(y_i))   if censored, y_i <= tau0
//! w_i = 0                                        if censored, y_i > tau0
//! ```
//!
//! where `tau0` is the largest event time (zero-tail constraint). The
//! M-step then splits into a weighted logistic regression for `gamma` and a
//! weighted Cox partial likelihood for `beta`, in which a censored subject
//! enters the risk sets with multiplier `w_i e^{beta'z_i}`. The baseline
//! hazard is the weighted Breslow estimator. Ties use the Breslow
//! convention.
//!
//! Internally records are sorted by time and covariates are centered and
//! scaled; coefficients are mapped back to the original scale on output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::solve_spd;
use crate::model::{dot, logistic, CureFit, Dataset, ModelLayout, StepFunction, LIKELIHOOD_CLAMP};

/// Fitted linear predictors this far from zero on every record mean the
/// incidence has separated.
const SEPARATION_ETA: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    pub max_iter: usize,
    /// Stop when the largest absolute change in `(gamma, beta)` falls below this.
    pub tol: f64,
    pub inner_newton_iter: usize,
    pub inner_tol: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            max_iter: 500,
            tol: 1e-7,
            inner_newton_iter: 25,
            inner_tol: 1e-10,
        }
    }
}

impl EmOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0
            || self.inner_newton_iter == 0
            || !(self.tol > 0.0)
            || !(self.inner_tol > 0.0)
        {
            return Err(Error::invalid("EM options must all be positive"));
        }
        Ok(())
    }
}

/// Posterior probabilities of being uncured, one per record in dataset order.
#[derive(Debug, Clone, PartialEq)]
pub struct UncureWeights(pub Vec<f64>);

impl UncureWeights {
    fn check(&self, n: usize) -> Result<()> {
        if self.0.len() != n {
            return Err(Error::invalid(format!(
                "{} weights for {n} records",
                self.0.len()
            )));
        }
        if self.0.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::invalid("weights must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IncidenceFit {
    pub gamma: Vec<f64>,
    /// Newton failed to reach the gradient tolerance or the fit separated.
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyFit {
    pub beta: Vec<f64>,
    pub baseline: StepFunction,
    pub diverged: bool,
}

/// Row-major dense matrix.
#[derive(Debug, Clone)]
struct Mat {
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Records of one distinct time, `start..end` in sorted order.
#[derive(Debug, Clone, Copy)]
struct TimeGroup {
    start: usize,
    end: usize,
    events: usize,
}

/// Centering and scaling of the non-intercept columns.
#[derive(Debug, Clone)]
struct Scaling {
    mean: Vec<f64>,
    sd: Vec<f64>,
}

impl Scaling {
    /// Constant columns keep unit scale; fitting entry points reject them
    /// through [`Scaling::check_full_rank`].
    fn fit(columns: &[Vec<f64>]) -> Scaling {
        let mut mean = Vec::with_capacity(columns.len());
        let mut sd = Vec::with_capacity(columns.len());
        for c in columns {
            let n = c.len() as f64;
            let m = c.iter().sum::<f64>() / n;
            let v = c.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
            let s = v.sqrt();
            mean.push(m);
            sd.push(if s > 1e-12 * (1.0 + m.abs()) { s } else { 0.0 });
        }
        Scaling { mean, sd }
    }

    fn scale(&self, j: usize) -> f64 {
        if self.sd[j] > 0.0 {
            self.sd[j]
        } else {
            1.0
        }
    }

    fn check_full_rank(&self, what: &str) -> Result<()> {
        match self.sd.iter().position(|&s| s == 0.0) {
            Some(j) => Err(Error::invalid(format!(
                "{what} covariate {j} is constant; the design is not of full rank"
            ))),
            None => Ok(()),
        }
    }
}

/// Dataset prepared for fitting: sorted canonically, standardized.
struct Prepared {
    n: usize,
    /// `order[k]` is the dataset index of the k-th sorted record.
    order: Vec<usize>,
    times: Vec<f64>,
    events: Vec<bool>,
    x: Mat,
    z: Mat,
    groups: Vec<TimeGroup>,
    /// Indices into `groups` of the groups containing events.
    event_groups: Vec<usize>,
    tau0: f64,
    xs: Scaling,
    zs: Scaling,
}

impl Prepared {
    fn new(data: &Dataset, layout: &ModelLayout) -> Result<Prepared> {
        layout.check(data)?;
        let n = data.len();
        if n == 0 {
            return Err(Error::invalid("empty dataset"));
        }
        let tau0 = data
            .last_event_time()
            .ok_or_else(|| Error::invalid("at least one event is required"))?;
        let recs = data.records();
        let order = data.canonical_order();
        let times: Vec<f64> = order.iter().map(|&i| recs[i].time).collect();
        let events: Vec<bool> = order.iter().map(|&i| recs[i].event).collect();

        let xcols: Vec<Vec<f64>> = layout
            .incidence
            .iter()
            .map(|&j| order.iter().map(|&i| recs[i].covariates[j]).collect())
            .collect();
        let zcols: Vec<Vec<f64>> = layout
            .latency
            .iter()
            .map(|&j| order.iter().map(|&i| recs[i].covariates[j]).collect())
            .collect();
        let xs = Scaling::fit(&xcols);
        let zs = Scaling::fit(&zcols);
        let p = xcols.len() + 1;
        let q = zcols.len();
        let mut x = Mat {
            cols: p,
            data: Vec::with_capacity(n * p),
        };
        let mut z = Mat {
            cols: q,
            data: Vec::with_capacity(n * q),
        };
        for k in 0..n {
            x.data.push(1.0);
            for (j, c) in xcols.iter().enumerate() {
                x.data.push((c[k] - xs.mean[j]) / xs.scale(j));
            }
            for (j, c) in zcols.iter().enumerate() {
                z.data.push((c[k] - zs.mean[j]) / zs.scale(j));
            }
        }

        let mut groups = Vec::new();
        let mut event_groups = Vec::new();
        let mut k = 0;
        while k < n {
            let start = k;
            let mut d = 0;
            while k < n && times[k] == times[start] {
                d += events[k] as usize;
                k += 1;
            }
            if d > 0 {
                event_groups.push(groups.len());
            }
            groups.push(TimeGroup {
                start,
                end: k,
                events: d,
            });
        }
        Ok(Prepared {
            n,
            order,
            times,
            events,
            x,
            z,
            groups,
            event_groups,
            tau0,
            xs,
            zs,
        })
    }

    fn p(&self) -> usize {
        self.x.cols
    }

    fn q(&self) -> usize {
        self.z.cols
    }

    fn check_full_rank(&self) -> Result<()> {
        self.xs.check_full_rank("incidence")?;
        self.zs.check_full_rank("latency")
    }

    /// Weights given in dataset order, permuted to sorted order.
    fn sorted_weights(&self, w: &UncureWeights) -> Vec<f64> {
        self.order.iter().map(|&i| w.0[i]).collect()
    }

    fn gamma_to_internal(&self, gamma: &[f64]) -> Vec<f64> {
        let mut g = gamma.to_vec();
        for j in 1..g.len() {
            g[0] += gamma[j] * self.xs.mean[j - 1];
            g[j] = gamma[j] * self.xs.scale(j - 1);
        }
        g
    }

    fn gamma_to_original(&self, g: &[f64]) -> Vec<f64> {
        let mut gamma = g.to_vec();
        for j in 1..g.len() {
            gamma[j] = g[j] / self.xs.scale(j - 1);
            gamma[0] -= gamma[j] * self.xs.mean[j - 1];
        }
        gamma
    }

    fn beta_to_internal(&self, beta: &[f64]) -> Vec<f64> {
        beta.iter()
            .enumerate()
            .map(|(j, b)| b * self.zs.scale(j))
            .collect()
    }

    fn beta_to_original(&self, b: &[f64]) -> Vec<f64> {
        b.iter()
            .enumerate()
            .map(|(j, b)| b / self.zs.scale(j))
            .collect()
    }

    /// `exp(beta' m)`: the factor between internal and original baselines.
    fn baseline_shift(&self, beta_original: &[f64]) -> f64 {
        dot(beta_original, &self.zs.mean).exp()
    }

    fn event_times(&self) -> Vec<f64> {
        self.event_groups
            .iter()
            .map(|&g| self.times[self.groups[g].start])
            .collect()
    }

    fn eta_x(&self, gamma: &[f64]) -> Vec<f64> {
        (0..self.n).map(|k| dot(self.x.row(k), gamma)).collect()
    }

    fn eta_z(&self, beta: &[f64]) -> Vec<f64> {
        (0..self.n).map(|k| dot(self.z.row(k), beta)).collect()
    }
}

struct NewtonOutcome {
    x: Vec<f64>,
    converged: bool,
}

/// Newton ascent with step halving. `eval` returns the objective, its
/// gradient and the negated Hessian (row-major), or `None` if undefined.
fn newton_ascent<F>(init: &[f64], max_iter: usize, tol: f64, mut eval: F) -> NewtonOutcome
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>, Vec<f64>)>,
{
    let k = init.len();
    let mut x = init.to_vec();
    if k == 0 {
        return NewtonOutcome { x, converged: true };
    }
    let Some(mut cur) = eval(&x) else {
        return NewtonOutcome {
            x,
            converged: false,
        };
    };
    for _ in 0..max_iter {
        let gmax = cur.1.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
        if gmax < 1e-6 * tol {
            return NewtonOutcome { x, converged: true };
        }
        let Some(step) = solve_spd(&cur.2, &cur.1) else {
            return NewtonOutcome {
                x,
                converged: false,
            };
        };
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = x.iter().zip(&step).map(|(a, s)| a + t * s).collect();
            if let Some(next) = eval(&trial) {
                if next.0.is_finite() && next.0 >= cur.0 - 1e-13 * (1.0 + cur.0.abs()) {
                    accepted = Some((trial, next));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((trial, next)) = accepted else {
            // No ascent possible along the Newton direction: we are at the
            // optimum up to rounding.
            let rel = gmax / (1.0 + cur.0.abs());
            return NewtonOutcome {
                x,
                converged: rel < 1e-8,
            };
        };
        let moved = trial
            .iter()
            .zip(&x)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        x = trial;
        cur = next;
        if moved < tol {
            return NewtonOutcome { x, converged: true };
        }
    }
    let gmax = cur.1.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
    NewtonOutcome {
        x,
        converged: gmax < tol,
    }
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

const LOG_CLAMP: f64 = -27.631_021_115_928_547; // ln(1e-12)

fn log_phi(eta: f64) -> f64 {
    (-softplus(-eta)).max(LOG_CLAMP)
}

fn log_one_minus_phi(eta: f64) -> f64 {
    (-softplus(eta)).max(LOG_CLAMP)
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(LIKELIHOOD_CLAMP, 1.0 - LIKELIHOOD_CLAMP)
}

/// Weighted Bernoulli log-likelihood with gradient and negated Hessian.
fn logistic_objective(x: &Mat, w: &[f64], gamma: &[f64]) -> Option<(f64, Vec<f64>, Vec<f64>)> {
    let p = x.cols;
    let mut val = 0.0;
    let mut grad = vec![0.0; p];
    let mut hess = vec![0.0; p * p];
    for (k, &wk) in w.iter().enumerate() {
        let row = x.row(k);
        let eta = dot(row, gamma);
        let phi = logistic(eta);
        val += wk * log_phi(eta) + (1.0 - wk) * log_one_minus_phi(eta);
        let r = wk - phi;
        let v = phi * (1.0 - phi);
        for a in 0..p {
            grad[a] += r * row[a];
            let va = v * row[a];
            for b in 0..=a {
                hess[a * p + b] += va * row[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            hess[b * p + a] = hess[a * p + b];
        }
    }
    val.is_finite().then_some((val, grad, hess))
}

fn fit_logistic(x: &Mat, w: &[f64], init: &[f64], opts: &EmOptions) -> (Vec<f64>, bool) {
    let out = newton_ascent(init, opts.inner_newton_iter, opts.inner_tol, |g| {
        logistic_objective(x, w, g)
    });
    let eta_min = (0..w.len())
        .map(|k| dot(x.row(k), &out.x).abs())
        .fold(f64::INFINITY, f64::min);
    let separated = eta_min > SEPARATION_ETA;
    (out.x, !out.converged || separated)
}

/// Weighted Cox log partial likelihood (Breslow ties) with derivatives.
fn cox_objective(prep: &Prepared, w: &[f64], beta: &[f64]) -> Option<(f64, Vec<f64>, Vec<f64>)> {
    let q = prep.q();
    let mut s0 = 0.0;
    let mut s1 = vec![0.0; q];
    let mut s2 = vec![0.0; q * q];
    let mut val = 0.0;
    let mut grad = vec![0.0; q];
    let mut hess = vec![0.0; q * q];
    for g in prep.groups.iter().rev() {
        let mut ev_eta = 0.0;
        for k in g.start..g.end {
            let row = prep.z.row(k);
            let eta = dot(row, beta);
            let r = w[k] * eta.exp();
            s0 += r;
            for a in 0..q {
                s1[a] += r * row[a];
                for b in 0..=a {
                    s2[a * q + b] += r * row[a] * row[b];
                }
            }
            if prep.events[k] {
                ev_eta += eta;
                for (ga, za) in grad.iter_mut().zip(row) {
                    *ga += za;
                }
            }
        }
        if g.events > 0 {
            if !(s0 > 0.0) {
                return None;
            }
            let d = g.events as f64;
            val += ev_eta - d * s0.ln();
            for a in 0..q {
                let ma = s1[a] / s0;
                grad[a] -= d * ma;
                for b in 0..=a {
                    hess[a * q + b] += d * (s2[a * q + b] / s0 - ma * s1[b] / s0);
                }
            }
        }
    }
    for a in 0..q {
        for b in 0..a {
            hess[b * q + a] = hess[a * q + b];
        }
    }
    val.is_finite().then_some((val, grad, hess))
}

/// Breslow jumps at the event groups for fixed `beta`.
fn breslow_jumps(prep: &Prepared, w: &[f64], beta: &[f64]) -> Vec<f64> {
    let mut jumps = vec![0.0; prep.event_groups.len()];
    let mut s0 = 0.0;
    let mut e = prep.event_groups.len();
    for (gi, g) in prep.groups.iter().enumerate().rev() {
        for k in g.start..g.end {
            s0 += w[k] * dot(prep.z.row(k), beta).exp();
        }
        if g.events > 0 {
            e -= 1;
            debug_assert_eq!(prep.event_groups[e], gi);
            jumps[e] = g.events as f64 / s0;
        }
    }
    jumps
}

/// Cumulative hazard at each sorted record's own time.
fn cumhaz_at_records(prep: &Prepared, jumps: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; prep.n];
    let mut acc = 0.0;
    let mut e = 0;
    for (gi, g) in prep.groups.iter().enumerate() {
        if e < prep.event_groups.len() && prep.event_groups[e] == gi {
            acc += jumps[e];
            e += 1;
        }
        for v in &mut out[g.start..g.end] {
            *v = acc;
        }
    }
    out
}

fn estep_internal(prep: &Prepared, eta_x: &[f64], eta_z: &[f64], cumhaz: &[f64]) -> Vec<f64> {
    (0..prep.n)
        .map(|k| {
            if prep.events[k] {
                1.0
            } else if prep.times[k] > prep.tau0 {
                0.0
            } else {
                let phi = clamp_prob(logistic(eta_x[k]));
                let su = (-cumhaz[k] * eta_z[k].exp()).exp();
                phi * su / (1.0 - phi + phi * su)
            }
        })
        .collect()
}

fn loglik_internal(prep: &Prepared, eta_x: &[f64], eta_z: &[f64], jumps: &[f64]) -> f64 {
    let cumhaz = cumhaz_at_records(prep, jumps);
    // jump size at each event group, indexed by group
    let mut jump_of_group = vec![0.0; prep.groups.len()];
    for (e, &gi) in prep.event_groups.iter().enumerate() {
        jump_of_group[gi] = jumps[e];
    }
    let mut total = 0.0;
    for (gi, g) in prep.groups.iter().enumerate() {
        for k in g.start..g.end {
            let rel = eta_z[k].exp();
            if prep.events[k] {
                total += log_phi(eta_x[k]) + jump_of_group[gi].ln() + eta_z[k] - cumhaz[k] * rel;
            } else {
                let phi = clamp_prob(logistic(eta_x[k]));
                let su = if prep.times[k] > prep.tau0 {
                    0.0
                } else {
                    (-cumhaz[k] * rel).exp()
                };
                total += (1.0 - phi + phi * su).ln();
            }
        }
    }
    total
}

/// Internal EM state, all on the standardized scale.
struct EmState {
    gamma: Vec<f64>,
    beta: Vec<f64>,
    jumps: Vec<f64>,
}

struct EmRun {
    state: EmState,
    converged: bool,
    diverged: bool,
    iterations: usize,
    trace: Vec<f64>,
}

fn max_abs_change(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
}

fn run_em(
    prep: &Prepared,
    mut state: EmState,
    frozen_gamma: bool,
    opts: &EmOptions,
    trace: bool,
) -> EmRun {
    let mut eta_x = prep.eta_x(&state.gamma);
    let mut eta_z = prep.eta_z(&state.beta);
    let mut log = Vec::new();
    if trace {
        log.push(loglik_internal(prep, &eta_x, &eta_z, &state.jumps));
    }
    let mut converged = false;
    let mut diverged = false;
    let mut iterations = 0;
    let mut orig = (
        prep.gamma_to_original(&state.gamma),
        prep.beta_to_original(&state.beta),
    );
    while iterations < opts.max_iter {
        iterations += 1;
        let cumhaz = cumhaz_at_records(prep, &state.jumps);
        let w = estep_internal(prep, &eta_x, &eta_z, &cumhaz);
        if !frozen_gamma {
            let (g, div) = fit_logistic(&prep.x, &w, &state.gamma, opts);
            state.gamma = g;
            eta_x = prep.eta_x(&state.gamma);
            if div {
                diverged = true;
            }
        }
        let cox = newton_ascent(&state.beta, opts.inner_newton_iter, opts.inner_tol, |b| {
            cox_objective(prep, &w, b)
        });
        state.beta = cox.x;
        eta_z = prep.eta_z(&state.beta);
        state.jumps = breslow_jumps(prep, &w, &state.beta);
        if trace {
            log.push(loglik_internal(prep, &eta_x, &eta_z, &state.jumps));
        }
        let next = (
            prep.gamma_to_original(&state.gamma),
            prep.beta_to_original(&state.beta),
        );
        let change = max_abs_change(&next.0, &orig.0).max(max_abs_change(&next.1, &orig.1));
        orig = next;
        let separated = eta_x.iter().all(|e| e.abs() > SEPARATION_ETA);
        if separated {
            diverged = true;
            break;
        }
        if !change.is_finite() {
            diverged = true;
            break;
        }
        if change < opts.tol {
            converged = true;
            break;
        }
    }
    EmRun {
        state,
        converged,
        diverged,
        iterations,
        trace: log,
    }
}

fn finish(prep: &Prepared, run: &EmRun) -> CureFit {
    let gamma = prep.gamma_to_original(&run.state.gamma);
    let beta = prep.beta_to_original(&run.state.beta);
    let shift = prep.baseline_shift(&beta);
    let mut acc = 0.0;
    let values: Vec<f64> = run
        .state
        .jumps
        .iter()
        .map(|j| {
            acc += j;
            acc / shift
        })
        .collect();
    let baseline = StepFunction::new(prep.event_times(), values, 0.0)
        .expect("event times are strictly increasing");
    let eta_x = prep.eta_x(&run.state.gamma);
    let eta_z = prep.eta_z(&run.state.beta);
    CureFit {
        gamma,
        beta,
        baseline,
        tau0: prep.tau0,
        loglik: loglik_internal(prep, &eta_x, &eta_z, &run.state.jumps),
        converged: run.converged && !run.diverged,
        iterations: run.iterations,
        incidence_diverged: run.diverged,
    }
}

fn check_fit_input(data: &Dataset) -> Result<()> {
    let events = data.event_count();
    if events == 0 {
        return Err(Error::invalid("no events: the latency cannot be estimated"));
    }
    if events == data.len() {
        return Err(Error::invalid(
            "no censored records: the cure fraction is not identifiable",
        ));
    }
    Ok(())
}

fn initial_state(prep: &Prepared, opts: &EmOptions) -> EmState {
    let delta: Vec<f64> = prep.events.iter().map(|&e| e as u8 as f64).collect();
    let (gamma, _) = fit_logistic(&prep.x, &delta, &vec![0.0; prep.p()], opts);
    let cox = newton_ascent(
        &vec![0.0; prep.q()],
        opts.inner_newton_iter,
        opts.inner_tol,
        |b| cox_objective(prep, &delta, b),
    );
    let beta = if cox.x.iter().all(|v| v.is_finite()) {
        cox.x
    } else {
        vec![0.0; prep.q()]
    };
    let jumps = breslow_jumps(prep, &delta, &beta);
    EmState { gamma, beta, jumps }
}

/// Fits the mixture cure model by EM from the default initialization.
pub fn fit_mle(data: &Dataset, layout: &ModelLayout, opts: &EmOptions) -> Result<CureFit> {
    fit_mle_traced(data, layout, opts).map(|(fit, _)| fit)
}

/// Like [`fit_mle`], also returning the observed-data log-likelihood at the
/// initial values and after every iteration.
pub fn fit_mle_traced(
    data: &Dataset,
    layout: &ModelLayout,
    opts: &EmOptions,
) -> Result<(CureFit, Vec<f64>)> {
    opts.validate()?;
    check_fit_input(data)?;
    let prep = Prepared::new(data, layout)?;
    prep.check_full_rank()?;
    let state = initial_state(&prep, opts);
    let run = run_em(&prep, state, false, opts, true);
    Ok((finish(&prep, &run), run.trace))
}

/// EM for the latency only, with the incidence held at `gamma`.
pub fn fit_latency_given_incidence(
    data: &Dataset,
    layout: &ModelLayout,
    gamma: &[f64],
    opts: &EmOptions,
) -> Result<CureFit> {
    opts.validate()?;
    check_fit_input(data)?;
    let prep = Prepared::new(data, layout)?;
    prep.zs.check_full_rank("latency")?;
    if gamma.len() != prep.p() {
        return Err(Error::invalid(
            "incidence coefficient length does not match the layout",
        ));
    }
    let mut state = initial_state(&prep, opts);
    state.gamma = prep.gamma_to_internal(gamma);
    let run = run_em(&prep, state, true, opts, false);
    Ok(finish(&prep, &run))
}

/// Posterior uncure probabilities at the current parameters.
pub fn e_step(data: &Dataset, layout: &ModelLayout, current: &CureFit) -> Result<UncureWeights> {
    layout.check(data)?;
    if current.gamma.len() != layout.n_gamma() || current.beta.len() != layout.n_beta() {
        return Err(Error::invalid("fit dimensions do not match the layout"));
    }
    let w = data
        .records()
        .iter()
        .map(|r| {
            if r.event {
                1.0
            } else if r.time > current.tau0 {
                0.0
            } else {
                let phi = clamp_prob(logistic(dot(&current.gamma, &layout.incidence_design(r))));
                let su = (-current.baseline.eval(r.time)
                    * dot(&current.beta, &layout.latency_design(r)).exp())
                .exp();
                phi * su / (1.0 - phi + phi * su)
            }
        })
        .collect();
    Ok(UncureWeights(w))
}

/// Maximizes `sum w log phi + (1 - w) log(1 - phi)` over `gamma`.
pub fn m_step_incidence(
    data: &Dataset,
    layout: &ModelLayout,
    w: &UncureWeights,
    init: &[f64],
    opts: &EmOptions,
) -> Result<IncidenceFit> {
    w.check(data.len())?;
    if init.len() != layout.n_gamma() {
        return Err(Error::invalid("initial gamma has the wrong length"));
    }
    let prep = prepare_for_weights(data, layout)?;
    prep.xs.check_full_rank("incidence")?;
    let ws = prep.sorted_weights(w);
    let (g, diverged) = fit_logistic(&prep.x, &ws, &prep.gamma_to_internal(init), opts);
    Ok(IncidenceFit {
        gamma: prep.gamma_to_original(&g),
        diverged,
    })
}

/// Weighted Cox partial likelihood for `beta` and the weighted Breslow
/// baseline at the maximizer.
pub fn m_step_latency(
    data: &Dataset,
    layout: &ModelLayout,
    w: &UncureWeights,
    init_beta: &[f64],
    opts: &EmOptions,
) -> Result<LatencyFit> {
    w.check(data.len())?;
    if init_beta.len() != layout.n_beta() {
        return Err(Error::invalid("initial beta has the wrong length"));
    }
    let prep = Prepared::new(data, layout)?;
    prep.zs.check_full_rank("latency")?;
    let ws = event_weights_forced(&prep, w);
    let out = newton_ascent(
        &prep.beta_to_internal(init_beta),
        opts.inner_newton_iter,
        opts.inner_tol,
        |b| cox_objective(&prep, &ws, b),
    );
    let beta = prep.beta_to_original(&out.x);
    let baseline = baseline_from_jumps(&prep, &breslow_jumps(&prep, &ws, &out.x), &beta);
    Ok(LatencyFit {
        beta,
        baseline,
        diverged: !out.converged,
    })
}

/// Weighted Breslow estimator of the baseline cumulative hazard at a fixed
/// `beta`: jump `d_j / sum_{y_i >= t_j} w_i e^{beta'z_i}` at each event time.
pub fn breslow(
    data: &Dataset,
    layout: &ModelLayout,
    w: &UncureWeights,
    beta: &[f64],
) -> Result<StepFunction> {
    w.check(data.len())?;
    if beta.len() != layout.n_beta() {
        return Err(Error::invalid("beta has the wrong length"));
    }
    let prep = Prepared::new(data, layout)?;
    let ws = event_weights_forced(&prep, w);
    let jumps = breslow_jumps(&prep, &ws, &prep.beta_to_internal(beta));
    Ok(baseline_from_jumps(&prep, &jumps, beta))
}

fn event_weights_forced(prep: &Prepared, w: &UncureWeights) -> Vec<f64> {
    prep.sorted_weights(w)
        .into_iter()
        .zip(&prep.events)
        .map(|(wk, &e)| if e { 1.0 } else { wk })
        .collect()
}

fn baseline_from_jumps(prep: &Prepared, jumps: &[f64], beta_original: &[f64]) -> StepFunction {
    let shift = prep.baseline_shift(beta_original);
    let mut acc = 0.0;
    let values = jumps
        .iter()
        .map(|j| {
            acc += j;
            acc / shift
        })
        .collect();
    StepFunction::new(prep.event_times(), values, 0.0).expect("event times are strictly increasing")
}

/// The incidence M-step does not need events; build the pieces it uses
/// without insisting on one.
fn prepare_for_weights(data: &Dataset, layout: &ModelLayout) -> Result<Prepared> {
    if data.event_count() > 0 {
        return Prepared::new(data, layout);
    }
    // Attach a synthetic event time beyond all records; only the incidence
    // design and ordering are used.
    let mut recs = data.records().to_vec();
    if let Some(first) = recs.first_mut() {
        first.event = true;
    }
    let tmp = Dataset::new(recs, data.column_names().to_vec())?;
    Prepared::new(&tmp, layout)
}

/// Observed-data log-likelihood of a fit, with discrete hazard
/// contributions at event times and the zero-tail constraint beyond `tau0`.
pub fn observed_loglik(data: &Dataset, layout: &ModelLayout, fit: &CureFit) -> Result<f64> {
    layout.check(data)?;
    if fit.gamma.len() != layout.n_gamma() || fit.beta.len() != layout.n_beta() {
        return Err(Error::invalid("fit dimensions do not match the layout"));
    }
    let base = &fit.baseline;
    let mut total = 0.0;
    for r in data.records() {
        let eta_x = dot(&fit.gamma, &layout.incidence_design(r));
        let eta_z = dot(&fit.beta, &layout.latency_design(r));
        let cum = base.eval(r.time);
        if r.event {
            let k = base.times().partition_point(|&s| s < r.time);
            let jump = if k < base.len() && base.times()[k] == r.time {
                base.values()[k]
                    - if k == 0 {
                        base.value_before_first()
                    } else {
                        base.values()[k - 1]
                    }
            } else {
                0.0
            };
            total += log_phi(eta_x) + jump.ln() + eta_z - cum * eta_z.exp();
        } else {
            let phi = clamp_prob(logistic(eta_x));
            let su = if r.time > fit.tau0 {
                0.0
            } else {
                (-cum * eta_z.exp()).exp()
            };
            total += (1.0 - phi + phi * su).ln();
        }
    }
    Ok(total)
}
