//! Logistic/Cox mixture cure models with SIMEX correction for covariate
//! measurement error.
//!
//! The incidence `phi(gamma, x)` is the logistic probability of being
//! uncured and the latency is a Cox proportional hazards model with an
//! unspecified baseline, so that the population survival is
//! `1 - phi + phi S_u(t | z)`.
//!
//! * [`em`] fits the model by maximum likelihood with the EM algorithm.
//! * [`presmooth`] fits the incidence to kernel-smoothed cure probabilities.
//! * [`simex`] corrects either estimator for measurement error.
//! * [`mc`] holds the simulation designs and the Monte Carlo loop.
//! * [`inference`] gives bootstrap standard errors and Wald p-values.
//!
//! ```
//! use cure_simex::em::{fit_mle, EmOptions};
//! use cure_simex::mc::{generate, ScenarioSpec};
//! use cure_simex::rng::StreamKey;
//!
//! let spec = ScenarioSpec::model1(1, 1, 1)?;
//! let sample = generate(&spec, StreamKey::new(1))?;
//! let fit = fit_mle(&sample.latent, &spec.layout()?, &EmOptions::default())?;
//! assert!(fit.converged);
//! assert!((fit.beta[0] - 1.0).abs() < 0.5);
//! # Ok::<(), cure_simex::Error>(())
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod em;
pub mod error;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod mc;
pub mod model;
pub mod presmooth;
pub mod rng;
pub mod simex;

pub use error::{Error, Result};
pub use model::{CureFit, Dataset, ModelLayout, StepFunction, SurvivalRecord};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    pub struct Readme;
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/data.md")]
    pub struct Data;
    #[doc = include_str!("../../../book/src/em.md")]
    pub struct Em;
    #[doc = include_str!("../../../book/src/presmoothing.md")]
    pub struct Presmoothing;
    #[doc = include_str!("../../../book/src/simex.md")]
    pub struct Simex;
    #[doc = include_str!("../../../book/src/simulation.md")]
    pub struct Simulation;
    #[doc = include_str!("../../../book/src/bootstrap.md")]
    pub struct Bootstrap;
    #[doc = include_str!("../../../book/src/reproducibility.md")]
    pub struct Reproducibility;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
}
