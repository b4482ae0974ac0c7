#![allow(dead_code)]

pub mod oracles;

use cure_simex::model::{CureFit, Dataset, ModelLayout, StepFunction};
use cure_simex::simex::CureFitter;
use cure_simex::Result;

/// Evaluates `c_0 + c_1 x + c_2 x^2 + ...`.
pub fn poly(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

/// Fitter whose output depends only on the noise level: every parameter
/// and baseline value is a fixed polynomial in `lambda`.
pub struct PolynomialFitter {
    pub gamma: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub baseline: Vec<Vec<f64>>,
}

impl PolynomialFitter {
    pub fn quadratic() -> Self {
        PolynomialFitter {
            gamma: vec![vec![1.0, 2.0, 3.0], vec![-0.5, 0.25, 0.125]],
            beta: vec![vec![0.8, -0.3, 0.05]],
            baseline: vec![
                vec![0.2, 0.01, 0.002],
                vec![0.6, 0.05, -0.01],
                vec![1.1, 0.1, 0.0],
            ],
        }
    }

    pub fn at(&self, lambda: f64) -> CureFit {
        let eval = |cs: &Vec<Vec<f64>>| cs.iter().map(|c| poly(c, lambda)).collect::<Vec<_>>();
        CureFit {
            gamma: eval(&self.gamma),
            beta: eval(&self.beta),
            baseline: StepFunction::new(
                (1..=self.baseline.len()).map(|k| k as f64).collect(),
                eval(&self.baseline),
                0.0,
            )
            .unwrap(),
            tau0: self.baseline.len() as f64,
            loglik: 0.0,
            converged: true,
            iterations: 1,
            incidence_diverged: false,
        }
    }
}

impl CureFitter for PolynomialFitter {
    fn fit(&self, _data: &Dataset, _layout: &ModelLayout) -> Result<CureFit> {
        Ok(self.at(0.0))
    }

    fn fit_at_level(&self, _data: &Dataset, _layout: &ModelLayout, lambda: f64) -> Result<CureFit> {
        Ok(self.at(lambda))
    }
}

/// Mean and standard error of `x`.
pub fn mean_se(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}
