use cure_simex::em::observed_loglik;
use cure_simex::mc::{generate, ScenarioSpec};
use cure_simex::model::{CureFit, Dataset, ModelLayout};
use cure_simex::rng::StreamKey;

/// Brute-force Breslow: for every distinct event time, events there over
/// the weighted risk set, accumulated.
pub fn breslow_oracle(
    times: &[f64],
    events: &[bool],
    z: &[f64],
    w: &[f64],
    beta: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut ev: Vec<f64> = times
        .iter()
        .zip(events)
        .filter(|(_, &e)| e)
        .map(|(&t, _)| t)
        .collect();
    ev.sort_by(f64::total_cmp);
    ev.dedup();
    let mut acc = 0.0;
    let mut values = Vec::new();
    for &t in &ev {
        let d = times
            .iter()
            .zip(events)
            .filter(|(&s, &e)| e && s == t)
            .count() as f64;
        let denom: f64 = (0..times.len())
            .filter(|&i| times[i] >= t)
            .map(|i| if events[i] { 1.0 } else { w[i] } * (beta * z[i]).exp())
            .sum();
        acc += d / denom;
        values.push(acc);
    }
    (ev, values)
}

/// Dataset `i` of a fixed family of small simulated datasets drawn from
/// every model.
pub fn random_small_dataset(i: u64) -> (Dataset, ModelLayout) {
    let key = StreamKey::new(0xA5CE_u64 + i);
    let spec = if i.is_multiple_of(2) {
        ScenarioSpec::model1(1 + (i % 3) as u8, 1 + (i % 2) as u8, 1).unwrap()
    } else {
        ScenarioSpec::preset(2 + (i % 4) as u8, 1 + (i % 3) as u8).unwrap()
    };
    let spec = spec.with_n(30 + (i as usize % 5) * 10);
    let g = generate(&spec, key).unwrap();
    (g.observed, spec.layout().unwrap())
}

/// Largest absolute central-difference derivative of the observed-data
/// log-likelihood in `(gamma, beta)`, baseline held fixed.
pub fn max_abs_score(data: &Dataset, layout: &ModelLayout, fit: &CureFit) -> f64 {
    let ng = fit.gamma.len();
    let params = fit.parameters();
    let h = 1e-5;
    let ll = |p: &[f64]| {
        let mut f = fit.clone();
        f.gamma = p[..ng].to_vec();
        f.beta = p[ng..].to_vec();
        observed_loglik(data, layout, &f).unwrap()
    };
    (0..params.len())
        .map(|k| {
            let mut up = params.clone();
            let mut down = params.clone();
            up[k] += h;
            down[k] -= h;
            ((ll(&up) - ll(&down)) / (2.0 * h)).abs()
        })
        .fold(0.0, f64::max)
}
