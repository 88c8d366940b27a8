//! Exact Gaussian expectations of quadratics and of fixed-variance Gaussian
//! prior terms, with their gradients in the flat parameter layout.

use super::family::{packed_index, Scale, VariationalParams};
use super::{PriorBlock, ViError};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Second-order expansion `u(z) = f0 + gᵀ(z-z0) + ½ (z-z0)ᵀ H (z-z0)`; `H` is
/// only reachable through Hessian-vector products.
pub struct QuadraticExpansion<'a> {
    pub z0: Vec<f64>,
    pub f0: f64,
    pub g: Vec<f64>,
    pub hvp: &'a (dyn Fn(&[f64]) -> Vec<f64> + Sync),
}

/// Value and gradient of `E_q u(Z)` plus the Hessian products needed to
/// evaluate `∇_z u` at reparameterized points.
#[derive(Debug, Clone)]
pub struct QuadraticExpectation {
    pub value: f64,
    pub grad: Vec<f64>,
    /// `g + H (mu - z0)`
    pub(crate) grad_at_mean: Vec<f64>,
    /// `hl[j] = H L e_j`
    pub(crate) hl_columns: Vec<Vec<f64>>,
}

impl QuadraticExpectation {
    /// `∇_z u(mu + L xi) = g + H(mu - z0) + (H L) xi`
    pub fn grad_z_at(&self, xi: &[f64]) -> Vec<f64> {
        let mut out = self.grad_at_mean.clone();
        for (col, &x) in self.hl_columns.iter().zip(xi) {
            if x != 0.0 {
                for (o, c) in out.iter_mut().zip(col) {
                    *o += c * x;
                }
            }
        }
        out
    }
}

pub fn quadratic_expectation(
    params: &VariationalParams,
    expansion: &QuadraticExpansion<'_>,
) -> Result<QuadraticExpectation, ViError> {
    let d = params.dim();
    for len in [expansion.z0.len(), expansion.g.len()] {
        if len != d {
            return Err(ViError::DimensionMismatch {
                expected: d,
                got: len,
            });
        }
    }
    let delta: Vec<f64> = params
        .mean()
        .iter()
        .zip(&expansion.z0)
        .map(|(m, z)| m - z)
        .collect();
    let h_delta = if delta.iter().all(|v| *v == 0.0) {
        vec![0.0; d]
    } else {
        (expansion.hvp)(&delta)
    };

    let mut column = vec![0.0; d];
    let mut hl_columns = Vec::with_capacity(d);
    for j in 0..d {
        column.iter_mut().for_each(|v| *v = 0.0);
        for (i, c) in column.iter_mut().enumerate().skip(j) {
            *c = params.factor_entry(i, j);
        }
        hl_columns.push((expansion.hvp)(&column));
    }

    let lin: f64 = expansion.g.iter().zip(&delta).map(|(a, b)| a * b).sum();
    let quad: f64 = delta.iter().zip(&h_delta).map(|(a, b)| a * b).sum();
    let mut trace = 0.0;
    for (j, col) in hl_columns.iter().enumerate() {
        for (i, hl) in col.iter().enumerate().skip(j) {
            trace += params.factor_entry(i, j) * hl;
        }
    }
    let value = expansion.f0 + lin + 0.5 * quad + 0.5 * trace;

    let grad_at_mean: Vec<f64> = expansion
        .g
        .iter()
        .zip(&h_delta)
        .map(|(a, b)| a + b)
        .collect();
    let mut grad = grad_at_mean.clone();
    match params.scale() {
        Scale::DiagLogStd(_) => {
            for (i, col) in hl_columns.iter().enumerate() {
                grad.push(col[i] * params.factor_entry(i, i));
            }
        }
        Scale::Cholesky(_) => {
            for i in 0..d {
                for j in 0..i {
                    grad.push(hl_columns[j][i]);
                }
                grad.push(hl_columns[i][i] * params.factor_entry(i, i));
            }
        }
    }
    Ok(QuadraticExpectation {
        value,
        grad,
        grad_at_mean,
        hl_columns,
    })
}

/// `E_q u(Z)` and its gradient for a frozen quadratic expansion.
pub fn gaussian_quadratic_expectation_grad(
    params: &VariationalParams,
    expansion: &QuadraticExpansion<'_>,
) -> Result<(f64, Vec<f64>), ViError> {
    let q = quadratic_expectation(params, expansion)?;
    Ok((q.value, q.grad))
}

fn check_block(params: &VariationalParams, block: &PriorBlock) -> Result<(), ViError> {
    if block.indices.is_empty() {
        return Err(ViError::Domain("empty prior block".into()));
    }
    if !(block.std > 0.0) {
        return Err(ViError::Domain("prior block std must be positive".into()));
    }
    if let Some(&bad) = block.indices.iter().find(|&&i| i >= params.dim()) {
        return Err(ViError::Domain(format!(
            "prior block index {bad} out of range"
        )));
    }
    Ok(())
}

/// `E_q sum_{i in I} log N(z_i; 0, s²)` and its exact gradient.
pub fn gaussian_prior_term_grad(
    params: &VariationalParams,
    block: &PriorBlock,
) -> Result<(f64, Vec<f64>), ViError> {
    check_block(params, block)?;
    let d = params.dim();
    let s2 = block.std * block.std;
    let variances = params.marginal_variances();
    let mean = params.mean();
    let mut grad = vec![0.0; params.n_params()];
    let mut sq = 0.0;
    for &i in &block.indices {
        sq += mean[i] * mean[i] + variances[i];
        grad[i] = -mean[i] / s2;
        match params.scale() {
            Scale::DiagLogStd(_) => grad[d + i] = -variances[i] / s2,
            Scale::Cholesky(_) => {
                for j in 0..i {
                    grad[d + packed_index(i, j)] = -params.factor_entry(i, j) / s2;
                }
                let lii = params.factor_entry(i, i);
                grad[d + packed_index(i, i)] = -lii * lii / s2;
            }
        }
    }
    let n = block.indices.len() as f64;
    let value = -0.5 * n * (LN_2PI + s2.ln()) - sq / (2.0 * s2);
    Ok((value, grad))
}

/// `sum_{i in I} log N(z_i; 0, s²)` and its z-gradient (zero off the block).
pub fn gaussian_prior_log_density(z: &[f64], block: &PriorBlock) -> (f64, Vec<f64>) {
    let s2 = block.std * block.std;
    let mut grad = vec![0.0; z.len()];
    let mut value = -0.5 * block.indices.len() as f64 * (LN_2PI + s2.ln());
    for &i in &block.indices {
        value -= z[i] * z[i] / (2.0 * s2);
        grad[i] = -z[i] / s2;
    }
    (value, grad)
}
