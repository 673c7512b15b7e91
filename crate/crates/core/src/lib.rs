//! Distributed Bayesian detection with copula-dependent sensor observations.
//!
//! The fusion center only sees quantized sensor outputs. It estimates the
//! unknown prior and dependence/marginal parameters by maximum likelihood on
//! all quantized data collected so far, redesigns the sensor quantizers and
//! the fusion rule under the fitted model, and feeds the new quantizers back.
//!
//! Modules, bottom-up:
//! - [`copula`]: independence and Clayton copulas, Spearman's rho, sampling.
//! - [`model`]: Gamma marginals, joint densities, the parameter vector.
//! - [`quantization`]: grids, quantizer banks, cell masses, quantized pmfs.
//! - [`estimation`]: quantized log-likelihood, MLE, Fisher information.
//! - [`design`]: Bayes cost, fusion rules, quantizer search, feedback loop.
//! - [`harness`]: scenario configs, data generation, experiments, CLI.

pub mod copula;
pub mod design;
pub mod error;
pub mod estimation;
pub mod harness;
pub mod model;
pub mod quantization;

pub use error::{Error, Result};
