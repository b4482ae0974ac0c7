mod common;

use common::oracles::{breslow_oracle, max_abs_score, random_small_dataset};
use cure_simex::em::{
    breslow, e_step, fit_mle, fit_mle_traced, m_step_incidence, m_step_latency, EmOptions,
    UncureWeights,
};
use cure_simex::mc::{generate, ScenarioSpec};
use cure_simex::model::{phi_logistic, CureFit, Dataset, ModelLayout, StepFunction};
use cure_simex::rng::StreamKey;
use proptest::prelude::*;

/// Maximizes a function of one variable on `[lo, hi]` by repeatedly
/// refining a uniform grid around the best point.
fn zoom_max_1d(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let mut best = lo;
    for _ in 0..40 {
        let step = (hi - lo) / 200.0;
        let mut best_val = f64::NEG_INFINITY;
        for k in 0..=200 {
            let x = lo + step * k as f64;
            let v = f(x);
            if v > best_val {
                best_val = v;
                best = x;
            }
        }
        lo = best - 2.0 * step;
        hi = best + 2.0 * step;
    }
    best
}

fn zoom_max_2d(f: impl Fn(f64, f64) -> f64, lo: f64, hi: f64) -> (f64, f64) {
    let (mut ax, mut bx, mut ay, mut by) = (lo, hi, lo, hi);
    let mut best = (lo, lo);
    for _ in 0..30 {
        let sx = (bx - ax) / 80.0;
        let sy = (by - ay) / 80.0;
        let mut best_val = f64::NEG_INFINITY;
        for i in 0..=80 {
            for j in 0..=80 {
                let (x, y) = (ax + sx * i as f64, ay + sy * j as f64);
                let v = f(x, y);
                if v > best_val {
                    best_val = v;
                    best = (x, y);
                }
            }
        }
        ax = best.0 - 2.0 * sx;
        bx = best.0 + 2.0 * sx;
        ay = best.1 - 2.0 * sy;
        by = best.1 + 2.0 * sy;
    }
    best
}

#[test]
fn weighted_logistic_matches_grid_search() {
    let x = [0.0, 1.0, 0.0, 1.0];
    let w = [1.0, 1.0, 0.5, 0.0];
    let data = Dataset::from_columns(
        &[1.0, 2.0, 3.0, 4.0],
        &[true, false, false, false],
        &[x.to_vec()],
    )
    .unwrap();
    let layout = ModelLayout::error_free(vec![0], vec![0], 1).unwrap();
    let fit = m_step_incidence(
        &data,
        &layout,
        &UncureWeights(w.to_vec()),
        &[0.0, 0.0],
        &EmOptions::default(),
    )
    .unwrap();

    let objective = |g0: f64, g1: f64| {
        x.iter()
            .zip(&w)
            .map(|(&xi, &wi)| {
                let p = 1.0 / (1.0 + (-(g0 + g1 * xi)).exp());
                wi * p.ln() + (1.0 - wi) * (1.0 - p).ln()
            })
            .sum::<f64>()
    };
    let (g0, g1) = zoom_max_2d(objective, -10.0, 10.0);
    assert!((fit.gamma[0] - g0).abs() < 1e-4, "{:?} vs {g0}", fit.gamma);
    assert!((fit.gamma[1] - g1).abs() < 1e-4, "{:?} vs {g1}", fit.gamma);
    assert!((g0 - 3f64.ln()).abs() < 1e-4);
    assert!((g1 + 3f64.ln()).abs() < 1e-4);
    assert!(!fit.diverged);
}

fn cox_data() -> (Dataset, Vec<f64>) {
    let t = [1.0, 2.0, 3.0, 4.0, 5.0];
    let d = [true, false, true, true, false];
    let z = vec![0.5, -1.0, 1.5, -0.5, 0.2];
    let w = vec![1.0, 0.75, 1.0, 1.0, 0.25];
    (Dataset::from_columns(&t, &d, &[z]).unwrap(), w)
}

fn weighted_partial_loglik(data: &Dataset, w: &[f64], beta: f64) -> f64 {
    let recs = data.records();
    recs.iter()
        .filter(|r| r.event)
        .map(|r| {
            let denom: f64 = recs
                .iter()
                .zip(w)
                .filter(|(k, _)| k.time >= r.time)
                .map(|(k, wk)| wk * (beta * k.covariates[0]).exp())
                .sum();
            beta * r.covariates[0] - denom.ln()
        })
        .sum()
}

#[test]
fn weighted_cox_matches_grid_search() {
    let (data, w) = cox_data();
    let layout = ModelLayout::error_free(vec![0], vec![0], 1).unwrap();
    let fit = m_step_latency(
        &data,
        &layout,
        &UncureWeights(w.clone()),
        &[0.0],
        &EmOptions::default(),
    )
    .unwrap();
    let best = zoom_max_1d(|b| weighted_partial_loglik(&data, &w, b), -10.0, 10.0);
    assert!(
        (fit.beta[0] - best).abs() < 1e-4,
        "{} vs {best}",
        fit.beta[0]
    );

    // Breslow jumps at the maximizer, written out by hand.
    let b = fit.beta[0];
    let e = |z: f64| (b * z).exp();
    let j1 = 1.0 / (e(0.5) + 0.75 * e(-1.0) + e(1.5) + e(-0.5) + 0.25 * e(0.2));
    let j3 = 1.0 / (e(1.5) + e(-0.5) + 0.25 * e(0.2));
    let j4 = 1.0 / (e(-0.5) + 0.25 * e(0.2));
    let expected = [j1, j1 + j3, j1 + j3 + j4];
    assert_eq!(fit.baseline.times(), &[1.0, 3.0, 4.0]);
    for (got, want) in fit.baseline.values().iter().zip(expected) {
        assert!((got - want).abs() <= 1e-12 * want, "{got} vs {want}");
    }
}

#[test]
fn breslow_at_zero_beta_is_exact() {
    let (data, w) = cox_data();
    let layout = ModelLayout::error_free(vec![0], vec![0], 1).unwrap();
    let base = breslow(&data, &layout, &UncureWeights(w), &[0.0]).unwrap();
    let j1 = 1.0 / 4.0;
    let j3 = 1.0 / 2.25;
    let j4 = 1.0 / 1.25;
    assert_eq!(base.values(), &[j1, j1 + j3, j1 + j3 + j4]);
}

fn small_records() -> impl Strategy<Value = (Vec<f64>, Vec<bool>, Vec<f64>, Vec<f64>)> {
    (1usize..=6).prop_flat_map(|n| {
        (
            proptest::collection::vec(1u8..=4, n),
            proptest::collection::vec(any::<bool>(), n),
            proptest::collection::vec(-2.0f64..2.0, n),
            proptest::collection::vec(0u8..=8, n),
        )
            .prop_map(|(t, mut d, z, w)| {
                d[0] = true;
                (
                    t.into_iter().map(f64::from).collect(),
                    d,
                    z,
                    w.into_iter().map(|k| f64::from(k) / 8.0).collect(),
                )
            })
    })
}

proptest! {
    #[test]
    fn breslow_equals_brute_force((t, d, z, w) in small_records(), beta in -1.5f64..1.5) {
        let data = Dataset::from_columns(&t, &d, std::slice::from_ref(&z)).unwrap();
        let layout = ModelLayout::error_free(vec![0], vec![0], 1).unwrap();
        let got = breslow(&data, &layout, &UncureWeights(w.clone()), &[beta]).unwrap();
        let (times, want) = breslow_oracle(&t, &d, &z, &w, beta);
        prop_assert_eq!(got.times(), times.as_slice());
        for (g, o) in got.values().iter().zip(&want) {
            prop_assert!((g - o).abs() <= 1e-12 * o.abs(), "{} vs {}", g, o);
        }
        let zero = breslow(&data, &layout, &UncureWeights(w.clone()), &[0.0]).unwrap();
        let (_, want0) = breslow_oracle(&t, &d, &z, &w, 0.0);
        prop_assert_eq!(zero.values(), want0.as_slice());
    }

    #[test]
    fn estep_weights_are_probabilities(
        g0 in -4.0f64..4.0, g1 in -3.0f64..3.0, b in -2.0f64..2.0, scale in 0.05f64..3.0, seed in 0u64..1000,
    ) {
        let spec = ScenarioSpec::model1(1, 1, 1).unwrap().with_n(40);
        let data = generate(&spec, StreamKey::new(seed)).unwrap().observed;
        let layout = spec.layout().unwrap();
        let tau0 = data.last_event_time().unwrap();
        let mut ev: Vec<f64> = data.records().iter().filter(|r| r.event).map(|r| r.time).collect();
        ev.sort_by(f64::total_cmp);
        ev.dedup();
        let values = (1..=ev.len()).map(|k| scale * k as f64).collect();
        let fit = CureFit {
            gamma: vec![g0, g1],
            beta: vec![b],
            baseline: StepFunction::new(ev, values, 0.0).unwrap(),
            tau0,
            loglik: 0.0,
            converged: true,
            iterations: 0,
            incidence_diverged: false,
        };
        let w = e_step(&data, &layout, &fit).unwrap();
        for (r, wi) in data.records().iter().zip(&w.0) {
            prop_assert!((0.0..=1.0).contains(wi));
            if r.event {
                prop_assert_eq!(*wi, 1.0);
            } else if r.time > tau0 {
                prop_assert_eq!(*wi, 0.0);
            }
        }
    }
}

#[test]
fn em_never_decreases_the_likelihood() {
    let opts = EmOptions::default();
    let mut checked = 0;
    for i in 0..100 {
        let (data, layout) = random_small_dataset(i);
        let Ok((_, trace)) = fit_mle_traced(&data, &layout, &opts) else {
            continue;
        };
        checked += 1;
        for pair in trace.windows(2) {
            let slack = 1e-10 * pair[0].abs().max(1.0);
            assert!(
                pair[1] >= pair[0] - slack,
                "dataset {i}: {} -> {}",
                pair[0],
                pair[1]
            );
        }
    }
    assert!(checked >= 95, "only {checked} datasets could be fitted");
}

#[test]
fn score_vanishes_at_convergence() {
    let spec = ScenarioSpec::model1(1, 1, 1).unwrap();
    for seed in [11u64, 12, 13] {
        let data = generate(&spec, StreamKey::new(seed)).unwrap().observed;
        let layout = spec.layout().unwrap();
        let fit = fit_mle(&data, &layout, &EmOptions::default()).unwrap();
        assert!(fit.converged);
        let score = max_abs_score(&data, &layout, &fit);
        assert!(score < 1e-3, "seed {seed}: score {score}");
    }
}

#[test]
fn fits_are_scale_equivariant() {
    let spec = ScenarioSpec::model1(1, 1, 1).unwrap();
    let data = generate(&spec, StreamKey::new(5)).unwrap().observed;
    let layout = spec.layout().unwrap();
    let opts = EmOptions::default();
    let fit = fit_mle(&data, &layout, &opts).unwrap();
    let c = 3.0;
    let scaled = Dataset::from_columns(
        &data.times(),
        &data.events(),
        &[data.column(0).iter().map(|x| c * x).collect()],
    )
    .unwrap();
    let fit_s = fit_mle(&scaled, &layout, &opts).unwrap();
    assert!((fit_s.gamma[1] * c - fit.gamma[1]).abs() < 1e-6);
    assert!((fit_s.beta[0] * c - fit.beta[0]).abs() < 1e-6);
    for (a, b) in data.records().iter().zip(scaled.records()) {
        let pa = phi_logistic(&fit.gamma, &[1.0, a.covariates[0]]).unwrap();
        let pb = phi_logistic(&fit_s.gamma, &[1.0, b.covariates[0]]).unwrap();
        assert!((pa - pb).abs() < 1e-6);
    }
}

#[test]
fn fits_ignore_record_order() {
    let spec = ScenarioSpec::preset(2, 1).unwrap();
    let data = generate(&spec, StreamKey::new(8)).unwrap().observed;
    let layout = spec.layout().unwrap();
    let opts = EmOptions::default();
    let fit = fit_mle(&data, &layout, &opts).unwrap();
    let n = data.len();
    let order: Vec<usize> = (0..n).map(|i| (i * 37 + 11) % n).collect();
    let fit_p = fit_mle(&data.subset(&order), &layout, &opts).unwrap();
    for (a, b) in fit.parameters().iter().zip(fit_p.parameters()) {
        assert!((a - b).abs() < 1e-10);
    }
    assert_eq!(fit.baseline.times(), fit_p.baseline.times());
}

#[test]
fn without_cure_the_incidence_diverges_and_latency_is_plain_cox() {
    let mut spec = ScenarioSpec::model1(1, 1, 1).unwrap().with_n(500);
    spec.gamma = vec![60.0, 0.0];
    spec.error_sd = vec![0.0];
    let data = generate(&spec, StreamKey::new(21)).unwrap().latent;
    let layout = ModelLayout::error_free(vec![0], vec![0], 1).unwrap();
    let fit = fit_mle(&data, &layout, &EmOptions::default()).unwrap();
    assert!(fit.incidence_diverged);
    let ones = UncureWeights(vec![1.0; data.len()]);
    let cox = m_step_latency(&data, &layout, &ones, &[0.0], &EmOptions::default()).unwrap();
    assert!(
        (fit.beta[0] - cox.beta[0]).abs() < 0.05,
        "{} vs {}",
        fit.beta[0],
        cox.beta[0]
    );
}
