//! Data types and closed-form quantities of the logistic/Cox mixture cure
//! model.
//!
//! A subject is uncured with probability `phi(gamma, x)` (logistic
//! incidence). Uncured subjects have survival
//! `S_u(t | z) = exp(-Lambda(t) exp(beta' z))` (Cox latency), so the
//! population survival is `1 - phi + phi * S_u(t | z)` and levels off at
//! the cure probability `1 - phi`.
//!
//! Incidence design vectors always start with the intercept entry `1`;
//! latency design vectors never carry an intercept.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::psd_sqrt;

/// Probabilities entering a log-likelihood are kept inside
/// `[LIKELIHOOD_CLAMP, 1 - LIKELIHOOD_CLAMP]`.
pub const LIKELIHOOD_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    /// Follow-up time `min(T, C)`.
    pub time: f64,
    /// `true` when the event was observed, `false` when censored.
    pub event: bool,
    pub covariates: Vec<f64>,
}

impl SurvivalRecord {
    pub fn new(time: f64, event: bool, covariates: Vec<f64>) -> Result<Self> {
        if !(time.is_finite() && time >= 0.0) {
            return Err(Error::invalid(format!(
                "follow-up time must be finite and nonnegative, got {time}"
            )));
        }
        if covariates.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("covariates must be finite"));
        }
        Ok(SurvivalRecord {
            time,
            event,
            covariates,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    records: Vec<SurvivalRecord>,
    column_names: Vec<String>,
}

impl Dataset {
    pub fn new(records: Vec<SurvivalRecord>, column_names: Vec<String>) -> Result<Self> {
        let d = column_names.len();
        for (i, r) in records.iter().enumerate() {
            if r.covariates.len() != d {
                return Err(Error::invalid(format!(
                    "record {i} has {} covariates, expected {d}",
                    r.covariates.len()
                )));
            }
        }
        Ok(Dataset {
            records,
            column_names,
        })
    }

    /// Builds a dataset from parallel columns, naming covariates `w1, w2, ...`.
    pub fn from_columns(times: &[f64], events: &[bool], covariates: &[Vec<f64>]) -> Result<Self> {
        if times.len() != events.len() || covariates.iter().any(|c| c.len() != times.len()) {
            return Err(Error::invalid("column lengths differ"));
        }
        let records = (0..times.len())
            .map(|i| {
                SurvivalRecord::new(
                    times[i],
                    events[i],
                    covariates.iter().map(|c| c[i]).collect(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let names = (1..=covariates.len()).map(|j| format!("w{j}")).collect();
        Dataset::new(records, names)
    }

    pub fn records(&self) -> &[SurvivalRecord] {
        &self.records
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Covariate dimension `D`.
    pub fn dim(&self) -> usize {
        self.column_names.len()
    }

    pub fn event_count(&self) -> usize {
        self.records.iter().filter(|r| r.event).count()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.records.iter().map(|r| r.covariates[j]).collect()
    }

    pub fn times(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.time).collect()
    }

    pub fn events(&self) -> Vec<bool> {
        self.records.iter().map(|r| r.event).collect()
    }

    /// Same times and indicators with replaced covariates.
    pub(crate) fn with_covariates(&self, covariates: Vec<Vec<f64>>) -> Dataset {
        let records = self
            .records
            .iter()
            .zip(covariates)
            .map(|(r, w)| SurvivalRecord {
                time: r.time,
                event: r.event,
                covariates: w,
            })
            .collect();
        Dataset {
            records,
            column_names: self.column_names.clone(),
        }
    }

    /// Dataset made of the records at `indices` (repeats allowed).
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            column_names: self.column_names.clone(),
        }
    }

    /// Record indices sorted by time, events before censorings at tied
    /// times, then by covariates. Two datasets holding the same records in
    /// different orders give the same sorted sequence.
    pub fn canonical_order(&self) -> Vec<usize> {
        let recs = &self.records;
        let mut order: Vec<usize> = (0..recs.len()).collect();
        order.sort_by(|&a, &b| {
            let (ra, rb) = (&recs[a], &recs[b]);
            ra.time
                .total_cmp(&rb.time)
                .then(rb.event.cmp(&ra.event))
                .then_with(|| {
                    ra.covariates
                        .iter()
                        .zip(&rb.covariates)
                        .map(|(x, y)| x.total_cmp(y))
                        .find(|o| o.is_ne())
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
        });
        order
    }

    /// Largest observed event time, if any.
    pub fn last_event_time(&self) -> Option<f64> {
        self.records
            .iter()
            .filter(|r| r.event)
            .map(|r| r.time)
            .max_by(|a, b| a.total_cmp(b))
    }
}

/// Which covariate columns enter the incidence (`X`) and the latency (`Z`),
/// and the covariance `V` of the additive measurement error on all columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelLayout {
    pub incidence: Vec<usize>,
    pub latency: Vec<usize>,
    pub error_cov: DMatrix<f64>,
}

impl ModelLayout {
    pub fn new(
        incidence: Vec<usize>,
        latency: Vec<usize>,
        error_cov: DMatrix<f64>,
    ) -> Result<Self> {
        // validates symmetry and positive semidefiniteness
        psd_sqrt(&error_cov)?;
        let d = error_cov.nrows();
        if let Some(&bad) = incidence.iter().chain(&latency).find(|&&j| j >= d) {
            return Err(Error::invalid(format!(
                "column index {bad} out of range for {d} covariates"
            )));
        }
        Ok(ModelLayout {
            incidence,
            latency,
            error_cov,
        })
    }

    /// Layout with independent errors of the given standard deviations
    /// (zero for error-free columns).
    pub fn with_error_sd(
        incidence: Vec<usize>,
        latency: Vec<usize>,
        error_sd: &[f64],
    ) -> Result<Self> {
        let v = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            error_sd.len(),
            error_sd.iter().map(|s| s * s),
        ));
        ModelLayout::new(incidence, latency, v)
    }

    /// Layout without measurement error.
    pub fn error_free(incidence: Vec<usize>, latency: Vec<usize>, dim: usize) -> Result<Self> {
        ModelLayout::new(incidence, latency, DMatrix::zeros(dim, dim))
    }

    pub fn dim(&self) -> usize {
        self.error_cov.nrows()
    }

    /// Number of incidence coefficients including the intercept.
    pub fn n_gamma(&self) -> usize {
        self.incidence.len() + 1
    }

    pub fn n_beta(&self) -> usize {
        self.latency.len()
    }

    pub fn incidence_design(&self, record: &SurvivalRecord) -> Vec<f64> {
        std::iter::once(1.0)
            .chain(self.incidence.iter().map(|&j| record.covariates[j]))
            .collect()
    }

    pub fn latency_design(&self, record: &SurvivalRecord) -> Vec<f64> {
        self.latency.iter().map(|&j| record.covariates[j]).collect()
    }

    pub(crate) fn check(&self, data: &Dataset) -> Result<()> {
        if data.dim() != self.dim() {
            return Err(Error::invalid(format!(
                "layout describes {} covariates but the dataset has {}",
                self.dim(),
                data.dim()
            )));
        }
        Ok(())
    }
}

/// Right-continuous step function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFunction {
    times: Vec<f64>,
    values: Vec<f64>,
    value_before_first: f64,
}

impl StepFunction {
    pub fn new(times: Vec<f64>, values: Vec<f64>, value_before_first: f64) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::invalid(
                "step function times and values differ in length",
            ));
        }
        if times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid(
                "step function times must be strictly increasing",
            ));
        }
        Ok(StepFunction {
            times,
            values,
            value_before_first,
        })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value_before_first(&self) -> f64 {
        self.value_before_first
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Value attached to the largest jump time `<= t`.
    pub fn eval(&self, t: f64) -> f64 {
        match self.times.partition_point(|&s| s <= t) {
            0 => self.value_before_first,
            k => self.values[k - 1],
        }
    }

    /// Whether the values never decrease, starting from `value_before_first`.
    pub fn is_non_decreasing(&self) -> bool {
        std::iter::once(&self.value_before_first)
            .chain(&self.values)
            .collect::<Vec<_>>()
            .windows(2)
            .all(|w| w[0] <= w[1])
    }

    pub fn is_non_increasing(&self) -> bool {
        std::iter::once(&self.value_before_first)
            .chain(&self.values)
            .collect::<Vec<_>>()
            .windows(2)
            .all(|w| w[0] >= w[1])
    }

    pub(crate) fn with_values(&self, values: Vec<f64>) -> StepFunction {
        debug_assert_eq!(values.len(), self.times.len());
        StepFunction {
            times: self.times.clone(),
            values,
            value_before_first: self.value_before_first,
        }
    }
}

/// A fitted mixture cure model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CureFit {
    /// Incidence coefficients; `gamma[0]` is the intercept.
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    /// Baseline cumulative hazard, jumping at the distinct event times.
    pub baseline: StepFunction,
    /// Largest event time; censored subjects beyond it are treated as cured.
    pub tau0: f64,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Set when the incidence fit ran into (quasi-)separation, i.e. the
    /// fitted uncure probabilities collapsed onto 0 or 1.
    #[serde(default)]
    pub incidence_diverged: bool,
}

impl CureFit {
    /// Incidence coefficients followed by latency coefficients.
    pub fn parameters(&self) -> Vec<f64> {
        self.gamma.iter().chain(&self.beta).copied().collect()
    }

    pub fn cure_probability(&self, x: &[f64]) -> Result<f64> {
        cure_probability(self, x)
    }
}

/// Logistic function of a linear predictor, accurate in both tails.
pub(crate) fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_dims(what: &str, coef: &[f64], design: &[f64]) -> Result<()> {
    if coef.len() != design.len() {
        return Err(Error::invalid(format!(
            "{what}: {} coefficients but design vector of length {}",
            coef.len(),
            design.len()
        )));
    }
    Ok(())
}

/// Uncure probability `e^{gamma'x} / (1 + e^{gamma'x})`; `x` starts with 1.
pub fn phi_logistic(gamma: &[f64], x: &[f64]) -> Result<f64> {
    check_dims("incidence", gamma, x)?;
    Ok(logistic(dot(gamma, x)))
}

/// Survival of an uncured subject, `exp(-Lambda(t) e^{beta'z})`.
pub fn cox_survival(beta: &[f64], baseline: &StepFunction, t: f64, z: &[f64]) -> Result<f64> {
    check_dims("latency", beta, z)?;
    if !(t >= 0.0) {
        return Err(Error::invalid("time must be nonnegative"));
    }
    Ok((-baseline.eval(t) * dot(beta, z).exp()).exp())
}

/// Population survival `1 - phi + phi * S_u(t | z)`.
pub fn population_survival(fit: &CureFit, t: f64, x: &[f64], z: &[f64]) -> Result<f64> {
    let phi = phi_logistic(&fit.gamma, x)?;
    let su = cox_survival(&fit.beta, &fit.baseline, t, z)?;
    Ok(1.0 - phi + phi * su)
}

/// Cure probability `1 - phi(gamma, x)`.
pub fn cure_probability(fit: &CureFit, x: &[f64]) -> Result<f64> {
    Ok(1.0 - phi_logistic(&fit.gamma, x)?)
}

/// Product-limit estimate of the survival function, jumping at the
/// distinct event times. Censorings tied with an event stay in its risk set.
pub fn kaplan_meier(data: &Dataset) -> Result<StepFunction> {
    kaplan_meier_raw(&data.times(), &data.events())
}

pub(crate) fn kaplan_meier_raw(times: &[f64], events: &[bool]) -> Result<StepFunction> {
    if times.is_empty() {
        return Err(Error::invalid("Kaplan-Meier needs at least one record"));
    }
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut at_risk = times.len() as f64;
    let mut surv = 1.0;
    let mut jump_times = Vec::new();
    let mut values = Vec::new();
    let mut k = 0;
    while k < order.len() {
        let t = times[order[k]];
        let mut deaths = 0.0;
        let mut leaving = 0.0;
        while k < order.len() && times[order[k]] == t {
            if events[order[k]] {
                deaths += 1.0;
            }
            leaving += 1.0;
            k += 1;
        }
        if deaths > 0.0 {
            surv *= 1.0 - deaths / at_risk;
            jump_times.push(t);
            values.push(surv);
        }
        at_risk -= leaving;
    }
    StepFunction::new(jump_times, values, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn fit_with(gamma: Vec<f64>, beta: Vec<f64>, times: Vec<f64>, lam: Vec<f64>) -> CureFit {
        CureFit {
            gamma,
            beta,
            baseline: StepFunction::new(times, lam, 0.0).unwrap(),
            tau0: 1.0,
            loglik: 0.0,
            converged: true,
            iterations: 0,
            incidence_diverged: false,
        }
    }

    #[test]
    fn phi_examples() {
        assert_eq!(phi_logistic(&[0.0, 0.0], &[1.0, 3.7]).unwrap(), 0.5);
        assert_abs_diff_eq!(
            phi_logistic(&[1.4, 0.5], &[1.0, 0.0]).unwrap(),
            0.80218,
            epsilon = 5e-6
        );
        assert!(phi_logistic(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn phi_saturates_without_nan() {
        let deep = phi_logistic(&[-700.0], &[1.0]).unwrap();
        assert!(deep > 0.0 && deep <= 1e-300);
        let deeper = phi_logistic(&[-800.0], &[1.0]).unwrap();
        assert!(deeper.is_finite() && (0.0..=1e-300).contains(&deeper));
        assert_eq!(phi_logistic(&[800.0], &[1.0]).unwrap(), 1.0);
    }

    #[test]
    fn cox_survival_examples() {
        let base = StepFunction::new(vec![1.0], vec![1.0], 0.0).unwrap();
        assert_eq!(cox_survival(&[0.3], &base, 0.5, &[2.0]).unwrap(), 1.0);
        assert_abs_diff_eq!(
            cox_survival(&[0.0], &base, 1.0, &[2.0]).unwrap(),
            0.36788,
            epsilon = 5e-6
        );
        // Weibull baseline mu * t^rho evaluated at t = 1
        let (mu, rho) = (1.5_f64, 1.75_f64);
        let weib = StepFunction::new(vec![1.0], vec![mu * 1.0_f64.powf(rho)], 0.0).unwrap();
        assert_abs_diff_eq!(
            cox_survival(&[1.0], &weib, 1.0, &[0.0]).unwrap(),
            0.22313,
            epsilon = 5e-6
        );
    }

    #[test]
    fn population_survival_examples() {
        let fit = fit_with(vec![0.0], vec![0.0], vec![1.0], vec![1.0]);
        assert_eq!(population_survival(&fit, 0.0, &[1.0], &[0.0]).unwrap(), 1.0);
        assert_abs_diff_eq!(
            population_survival(&fit, 1.0, &[1.0], &[0.0]).unwrap(),
            0.68394,
            epsilon = 5e-6
        );
        let certain_cure = fit_with(vec![-800.0], vec![0.0], vec![1.0], vec![50.0]);
        assert_eq!(
            population_survival(&certain_cure, 3.0, &[1.0], &[0.0]).unwrap(),
            1.0
        );
    }

    #[test]
    fn cure_probability_examples() {
        let fit = fit_with(vec![0.0], vec![], vec![], vec![]);
        assert_eq!(cure_probability(&fit, &[1.0]).unwrap(), 0.5);
    }

    #[test]
    fn km_examples() {
        let all = Dataset::from_columns(&[1.0, 2.0, 3.0], &[true, true, true], &[]).unwrap();
        let km = kaplan_meier(&all).unwrap();
        assert_abs_diff_eq!(km.eval(1.0), 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(km.eval(2.0), 1.0 / 3.0, epsilon = 1e-15);
        assert_eq!(km.eval(3.0), 0.0);

        let cens = Dataset::from_columns(&[1.0, 2.0, 3.0], &[true, false, true], &[]).unwrap();
        let km = kaplan_meier(&cens).unwrap();
        assert_abs_diff_eq!(km.eval(1.0), 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(km.eval(2.0), 2.0 / 3.0, epsilon = 1e-15);
        assert_eq!(km.eval(3.0), 0.0);
        assert_eq!(km.eval(0.5), 1.0);

        let empty = Dataset::from_columns(&[], &[], &[]).unwrap();
        assert!(kaplan_meier(&empty).is_err());
    }

    #[test]
    fn tied_censoring_stays_in_risk_set() {
        let d = Dataset::from_columns(&[1.0, 1.0, 2.0], &[true, false, true], &[]).unwrap();
        let km = kaplan_meier(&d).unwrap();
        assert_abs_diff_eq!(km.eval(1.0), 2.0 / 3.0, epsilon = 1e-15);
        assert_eq!(km.eval(2.0), 0.0);
    }

    #[test]
    fn step_function_is_right_continuous() {
        let s = StepFunction::new(vec![1.0, 2.0], vec![0.5, 0.9], 0.0).unwrap();
        assert_eq!(s.eval(0.999), 0.0);
        assert_eq!(s.eval(1.0), 0.5);
        assert_eq!(s.eval(2.0), 0.9);
        assert_eq!(s.eval(1e9), 0.9);
        assert!(s.is_non_decreasing());
        assert!(StepFunction::new(vec![1.0, 1.0], vec![0.0, 0.0], 0.0).is_err());
        let bumpy = StepFunction::new(vec![1.0, 2.0], vec![0.5, 0.4], 0.0).unwrap();
        assert!(!bumpy.is_non_decreasing());
    }

    #[test]
    fn record_validation() {
        assert!(SurvivalRecord::new(-1.0, true, vec![]).is_err());
        assert!(SurvivalRecord::new(1.0, true, vec![f64::NAN]).is_err());
        assert!(Dataset::new(
            vec![SurvivalRecord::new(1.0, true, vec![1.0]).unwrap()],
            vec!["a".into(), "b".into()]
        )
        .is_err());
    }

    proptest! {
        #[test]
        fn phi_symmetry(g in prop::collection::vec(-50.0..50.0f64, 3), x1 in -5.0..5.0f64, x2 in -5.0..5.0f64) {
            let x = [1.0, x1, x2];
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            let s = phi_logistic(&g, &x).unwrap() + phi_logistic(&neg, &x).unwrap();
            prop_assert!((s - 1.0).abs() < 1e-14);
        }

        #[test]
        fn population_survival_monotone_and_bounded(
            gamma in prop::collection::vec(-3.0..3.0f64, 2),
            beta in -2.0..2.0f64,
            jumps in prop::collection::vec(0.0..2.0f64, 1..12),
            x in -2.0..2.0f64,
            grid in prop::collection::vec(0.0..15.0f64, 2..30),
        ) {
            let times: Vec<f64> = (1..=jumps.len()).map(|k| k as f64).collect();
            let lam: Vec<f64> = jumps.iter().scan(0.0, |acc, j| { *acc += j; Some(*acc) }).collect();
            let fit = fit_with(gamma, vec![beta], times, lam);
            let xd = [1.0, x];
            let floor = 1.0 - phi_logistic(&fit.gamma, &xd).unwrap();
            let mut grid = grid;
            grid.sort_by(|a, b| a.total_cmp(b));
            let mut prev = f64::INFINITY;
            for t in grid {
                let s = population_survival(&fit, t, &xd, &[x]).unwrap();
                prop_assert!(s <= prev + 1e-15);
                prop_assert!(s >= floor - 1e-15);
                prev = s;
            }
        }

        #[test]
        fn km_without_censoring_is_ecdf_complement(times in prop::collection::vec(0.0..10.0f64, 1..50)) {
            // rounded times produce ties
            let times: Vec<f64> = times.iter().map(|t| (t * 4.0).round() / 4.0).collect();
            let events = vec![true; times.len()];
            let km = kaplan_meier_raw(&times, &events).unwrap();
            let n = times.len() as f64;
            for &t in times.iter().chain([0.0, 5.1, 11.0].iter()) {
                let ecdf = times.iter().filter(|&&s| s <= t).count() as f64 / n;
                prop_assert!((km.eval(t) - (1.0 - ecdf)).abs() < 1e-12);
            }
        }
    }
}
