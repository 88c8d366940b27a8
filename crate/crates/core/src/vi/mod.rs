//! Gaussian variational inference primitives.

mod expectations;
mod family;
mod models;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use expectations::{
    gaussian_prior_log_density, gaussian_prior_term_grad, gaussian_quadratic_expectation_grad,
    quadratic_expectation, QuadraticExpansion, QuadraticExpectation,
};
pub use family::{packed_index, Family, Scale, VariationalParams};
pub use models::{
    hvp_finite_difference, make_model, BayesianNeuralNet, GaussianTarget, HierarchicalPoisson,
    LogisticRegression, ModelKind, ModelOptions, ModelSpec, WeightPrior,
};

use crate::rng::{map_indexed, normal_draw, Execution};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ViError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid input: {0}")]
    Domain(String),
    #[error("malformed dataset: {0}")]
    Ingestion(String),
}

/// Latent coordinates `I` with a fixed `N(0, std²)` prior each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorBlock {
    pub indices: Vec<usize>,
    pub std: f64,
}

/// `(1/n) sum log p(x, T_w(xi_i)) + H(q_w)` over `n` seeded draws.
pub fn elbo_estimate(
    params: &VariationalParams,
    model: &dyn ModelSpec,
    n_samples: usize,
    seed: u64,
) -> Result<f64, ViError> {
    if n_samples == 0 {
        return Err(ViError::Domain("n_samples must be >= 1".into()));
    }
    if model.dim() != params.dim() {
        return Err(ViError::DimensionMismatch {
            expected: model.dim(),
            got: params.dim(),
        });
    }
    let d = params.dim();
    let values = map_indexed(n_samples, Execution::default(), |i| {
        model.log_joint(&params.transform_unchecked(&normal_draw(seed, i, d)))
    });
    let mean = values.iter().sum::<f64>() / n_samples as f64;
    Ok(mean + params.entropy_and_grad().0)
}
