//! Model log-joints over an unconstrained latent space, with gradients and
//! Hessian-vector products.
//!
//! Positive quantities (prior scales, noise levels) appear in log-space as
//! latent coordinates, exactly as the models are written, so every latent
//! vector in `R^d` is valid and reparameterized samples need no Jacobians.

use serde::{Deserialize, Serialize};

use super::expectations::gaussian_prior_log_density;
use super::{PriorBlock, ViError};
use crate::data::{ClassificationDataset, CountTable, Dataset, RegressionDataset};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// A differentiable log-joint `log p(x, z)` for fixed observed data `x`.
pub trait ModelSpec: Send + Sync {
    fn name(&self) -> &str;

    fn dim(&self) -> usize;

    fn log_joint(&self, z: &[f64]) -> f64;

    fn grad(&self, z: &[f64]) -> Vec<f64>;

    fn log_joint_and_grad(&self, z: &[f64]) -> (f64, Vec<f64>) {
        (self.log_joint(z), self.grad(z))
    }

    /// Hessian of the log-joint at `z` applied to `v`.
    fn hvp(&self, z: &[f64], v: &[f64]) -> Vec<f64>;

    /// Latent coordinates with a fixed `N(0, s²)` prior, if any.
    fn gaussian_prior_block(&self) -> Option<&PriorBlock>;
}

/// Central-difference Hessian-vector product `(∇f(z + hv) - ∇f(z - hv)) / 2h`.
pub fn hvp_finite_difference<G>(grad: G, z: &[f64], v: &[f64], h: f64) -> Vec<f64>
where
    G: Fn(&[f64]) -> Vec<f64>,
{
    let plus: Vec<f64> = z.iter().zip(v).map(|(a, b)| a + h * b).collect();
    let minus: Vec<f64> = z.iter().zip(v).map(|(a, b)| a - h * b).collect();
    grad(&plus)
        .iter()
        .zip(grad(&minus))
        .map(|(p, m)| (p - m) / (2.0 * h))
        .collect()
}

#[inline]
fn log_sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        -(-t).exp().ln_1p()
    } else {
        t - t.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LogReg,
    HierPoisson,
    BnnA,
    BnnB,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelOptions {
    pub hidden_units: usize,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self { hidden_units: 50 }
    }
}

pub fn make_model(
    kind: ModelKind,
    data: &Dataset,
    opts: &ModelOptions,
) -> Result<Box<dyn ModelSpec>, ViError> {
    match (kind, data) {
        (ModelKind::LogReg, Dataset::Classification(d)) => {
            Ok(Box::new(LogisticRegression::new(d)?))
        }
        (ModelKind::HierPoisson, Dataset::Counts(t)) => Ok(Box::new(HierarchicalPoisson::new(t)?)),
        (ModelKind::BnnA, Dataset::Regression(r)) => Ok(Box::new(BayesianNeuralNet::new(
            r,
            opts.hidden_units,
            WeightPrior::Hierarchical,
        )?)),
        (ModelKind::BnnB, Dataset::Regression(r)) => Ok(Box::new(BayesianNeuralNet::new(
            r,
            opts.hidden_units,
            WeightPrior::Fixed,
        )?)),
        (kind, other) => Err(ViError::Ingestion(format!(
            "model {kind:?} cannot be built from a {} dataset",
            other.kind_name()
        ))),
    }
}

/// Independent Gaussian target `N(mean, diag(std²))`, no data.
#[derive(Debug, Clone)]
pub struct GaussianTarget {
    mean: Vec<f64>,
    precision: Vec<f64>,
    log_norm: f64,
    block: Option<PriorBlock>,
}

impl GaussianTarget {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self, ViError> {
        if mean.len() != std.len() {
            return Err(ViError::DimensionMismatch {
                expected: mean.len(),
                got: std.len(),
            });
        }
        if std.iter().any(|s| !(*s > 0.0)) {
            return Err(ViError::Domain("target std must be positive".into()));
        }
        let log_norm = -0.5 * mean.len() as f64 * LN_2PI - std.iter().map(|s| s.ln()).sum::<f64>();
        let isotropic_at_zero =
            mean.iter().all(|m| *m == 0.0) && std.iter().all(|s| *s == std[0]) && !std.is_empty();
        let block = isotropic_at_zero.then(|| PriorBlock {
            indices: (0..mean.len()).collect(),
            std: std[0],
        });
        let precision = std.iter().map(|s| 1.0 / (s * s)).collect();
        Ok(Self {
            mean,
            precision,
            log_norm,
            block,
        })
    }

    pub fn standard(dim: usize) -> Self {
        Self::new(vec![0.0; dim], vec![1.0; dim]).expect("valid standard normal")
    }
}

impl ModelSpec for GaussianTarget {
    fn name(&self) -> &str {
        "gaussian"
    }

    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_joint(&self, z: &[f64]) -> f64 {
        let q: f64 = z
            .iter()
            .zip(&self.mean)
            .zip(&self.precision)
            .map(|((z, m), p)| (z - m) * (z - m) * p)
            .sum();
        self.log_norm - 0.5 * q
    }

    fn grad(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.mean)
            .zip(&self.precision)
            .map(|((z, m), p)| -(z - m) * p)
            .collect()
    }

    fn hvp(&self, _z: &[f64], v: &[f64]) -> Vec<f64> {
        v.iter().zip(&self.precision).map(|(v, p)| -v * p).collect()
    }

    fn gaussian_prior_block(&self) -> Option<&PriorBlock> {
        self.block.as_ref()
    }
}

/// Bayesian logistic regression with a standard normal prior on the bias and
/// weights and `P(y = +1) = 1 / (1 + exp(w0 + w·x))`.
///
/// Latent layout: `[w0, w_1, ..., w_p]`.
#[derive(Debug, Clone)]
pub struct LogisticRegression {
    // rows with a leading 1 for the bias
    rows: Vec<Vec<f64>>,
    labels: Vec<f64>,
    block: PriorBlock,
}

impl LogisticRegression {
    pub fn new(data: &ClassificationDataset) -> Result<Self, ViError> {
        if data.rows.is_empty() {
            return Err(ViError::Ingestion(
                "logistic regression needs at least one row".into(),
            ));
        }
        let p = data.dim;
        let mut rows = Vec::with_capacity(data.rows.len());
        for row in &data.rows {
            let mut dense = vec![0.0; p + 1];
            dense[0] = 1.0;
            for &(idx, val) in row {
                if idx >= p {
                    return Err(ViError::Ingestion(format!(
                        "feature index {idx} exceeds dimension {p}"
                    )));
                }
                dense[idx + 1] = val;
            }
            rows.push(dense);
        }
        let labels = data.labels.iter().map(|&y| y as f64).collect();
        Ok(Self {
            rows,
            labels,
            block: PriorBlock {
                indices: (0..=p).collect(),
                std: 1.0,
            },
        })
    }

    fn logits(&self, z: &[f64]) -> impl Iterator<Item = f64> + '_ {
        let z = z.to_vec();
        self.rows.iter().map(move |x| dot(x, &z))
    }
}

impl ModelSpec for LogisticRegression {
    fn name(&self) -> &str {
        "logreg"
    }

    fn dim(&self) -> usize {
        self.block.indices.len()
    }

    fn log_joint(&self, z: &[f64]) -> f64 {
        let prior = gaussian_prior_log_density(z, &self.block).0;
        let lik: f64 = self
            .logits(z)
            .zip(&self.labels)
            .map(|(s, y)| log_sigmoid(-y * s))
            .sum();
        prior + lik
    }

    fn log_joint_and_grad(&self, z: &[f64]) -> (f64, Vec<f64>) {
        let (mut value, mut grad) = gaussian_prior_log_density(z, &self.block);
        for (x, &y) in self.rows.iter().zip(&self.labels) {
            let s = dot(x, z);
            value += log_sigmoid(-y * s);
            let coef = -y * sigmoid(y * s);
            for (g, xi) in grad.iter_mut().zip(x) {
                *g += coef * xi;
            }
        }
        (value, grad)
    }

    fn grad(&self, z: &[f64]) -> Vec<f64> {
        self.log_joint_and_grad(z).1
    }

    fn hvp(&self, z: &[f64], v: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = v.iter().map(|x| -x).collect();
        for x in &self.rows {
            let s = dot(x, z);
            let w = sigmoid(s) * sigmoid(-s) * dot(x, v);
            for (o, xi) in out.iter_mut().zip(x) {
                *o -= w * xi;
            }
        }
        out
    }

    fn gaussian_prior_block(&self) -> Option<&PriorBlock> {
        Some(&self.block)
    }
}

/// Hierarchical Poisson model for stop counts by ethnicity and precinct.
///
/// Latent layout: `[mu, log sigma_alpha, log sigma_beta, alpha_1..E, beta_1..P]`.
#[derive(Debug, Clone)]
pub struct HierarchicalPoisson {
    n_eth: usize,
    n_prec: usize,
    stops: Vec<f64>,
    log_arrests: Vec<f64>,
    log_factorials: f64,
    block: PriorBlock,
}

const HYPER_STD: f64 = 10.0;

impl HierarchicalPoisson {
    pub fn new(table: &CountTable) -> Result<Self, ViError> {
        table
            .validate()
            .map_err(|e| ViError::Ingestion(e.to_string()))?;
        let stops: Vec<f64> = table.stops.iter().map(|&y| y as f64).collect();
        let log_arrests = table.arrests.iter().map(|&n| (n as f64).ln()).collect();
        let log_factorials = table
            .stops
            .iter()
            .map(|&y| (1..=y).map(|k| (k as f64).ln()).sum::<f64>())
            .sum();
        Ok(Self {
            n_eth: table.n_ethnicities,
            n_prec: table.n_precincts,
            stops,
            log_arrests,
            log_factorials,
            block: PriorBlock {
                indices: vec![0, 1, 2],
                std: HYPER_STD,
            },
        })
    }

    fn alpha(&self, e: usize) -> usize {
        3 + e
    }

    fn beta(&self, p: usize) -> usize {
        3 + self.n_eth + p
    }

    fn rate(&self, z: &[f64], e: usize, p: usize) -> f64 {
        (z[0] + z[self.alpha(e)] + z[self.beta(p)] + self.log_arrests[e * self.n_prec + p]).exp()
    }
}

impl ModelSpec for HierarchicalPoisson {
    fn name(&self) -> &str {
        "hier_poisson"
    }

    fn dim(&self) -> usize {
        3 + self.n_eth + self.n_prec
    }

    fn log_joint(&self, z: &[f64]) -> f64 {
        self.log_joint_and_grad(z).0
    }

    fn log_joint_and_grad(&self, z: &[f64]) -> (f64, Vec<f64>) {
        let (mut value, mut grad) = gaussian_prior_log_density(z, &self.block);
        grad.resize(self.dim(), 0.0);
        let (sa, sb) = (z[1], z[2]);
        let (pa, pb) = ((-2.0 * sa).exp(), (-2.0 * sb).exp());
        for e in 0..self.n_eth {
            let a = z[self.alpha(e)];
            value += -0.5 * LN_2PI - sa - 0.5 * a * a * pa;
            grad[self.alpha(e)] -= a * pa;
            grad[1] += -1.0 + a * a * pa;
        }
        for p in 0..self.n_prec {
            let b = z[self.beta(p)];
            value += -0.5 * LN_2PI - sb - 0.5 * b * b * pb;
            grad[self.beta(p)] -= b * pb;
            grad[2] += -1.0 + b * b * pb;
        }
        for e in 0..self.n_eth {
            for p in 0..self.n_prec {
                let k = e * self.n_prec + p;
                let log_rate = z[0] + z[self.alpha(e)] + z[self.beta(p)] + self.log_arrests[k];
                let rate = log_rate.exp();
                value += self.stops[k] * log_rate - rate;
                let r = self.stops[k] - rate;
                grad[0] += r;
                grad[self.alpha(e)] += r;
                grad[self.beta(p)] += r;
            }
        }
        (value - self.log_factorials, grad)
    }

    fn grad(&self, z: &[f64]) -> Vec<f64> {
        self.log_joint_and_grad(z).1
    }

    fn hvp(&self, z: &[f64], v: &[f64]) -> Vec<f64> {
        let h2 = 1.0 / (HYPER_STD * HYPER_STD);
        let mut out = vec![0.0; self.dim()];
        out[0] = -h2 * v[0];
        out[1] = -h2 * v[1];
        out[2] = -h2 * v[2];
        let (sa, sb) = (z[1], z[2]);
        let (pa, pb) = ((-2.0 * sa).exp(), (-2.0 * sb).exp());
        for e in 0..self.n_eth {
            let (i, a) = (self.alpha(e), z[self.alpha(e)]);
            // d²/da² = -pa, d²/da dsa = 2 a pa, d²/dsa² = -2 a² pa
            out[i] += -pa * v[i] + 2.0 * a * pa * v[1];
            out[1] += 2.0 * a * pa * v[i] - 2.0 * a * a * pa * v[1];
        }
        for p in 0..self.n_prec {
            let (i, b) = (self.beta(p), z[self.beta(p)]);
            out[i] += -pb * v[i] + 2.0 * b * pb * v[2];
            out[2] += 2.0 * b * pb * v[i] - 2.0 * b * b * pb * v[2];
        }
        for e in 0..self.n_eth {
            for p in 0..self.n_prec {
                let (ia, ib) = (self.alpha(e), self.beta(p));
                let c = self.rate(z, e, p) * (v[0] + v[ia] + v[ib]);
                out[0] -= c;
                out[ia] -= c;
                out[ib] -= c;
            }
        }
        out
    }

    fn gaussian_prior_block(&self) -> Option<&PriorBlock> {
        Some(&self.block)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightPrior {
    /// Weights `N(0, alpha²)` with `log alpha ~ N(0, 10²)`, `log tau ~ N(0, 10²)`.
    Hierarchical,
    /// Weights `N(0, 5²)`, `log tau ~ N(0, 5²)`.
    Fixed,
}

/// One-hidden-layer ReLU regression network with Gaussian noise.
///
/// Latent layout: `[log alpha (hierarchical prior only), log tau, W1 (H×D
/// row-major), b1 (H), W2 (H), b2]`.
#[derive(Debug, Clone)]
pub struct BayesianNeuralNet {
    features: Vec<Vec<f64>>,
    targets: Vec<f64>,
    hidden: usize,
    prior: WeightPrior,
    block: PriorBlock,
}

impl BayesianNeuralNet {
    pub fn new(
        data: &RegressionDataset,
        hidden: usize,
        prior: WeightPrior,
    ) -> Result<Self, ViError> {
        if data.features.is_empty() || hidden == 0 {
            return Err(ViError::Ingestion(
                "network needs rows and at least one hidden unit".into(),
            ));
        }
        let width = data.features[0].len();
        if data.features.iter().any(|r| r.len() != width)
            || data.targets.len() != data.features.len()
        {
            return Err(ViError::Ingestion("ragged regression dataset".into()));
        }
        let mut net = Self {
            features: data.features.clone(),
            targets: data.targets.clone(),
            hidden,
            prior,
            block: PriorBlock {
                indices: Vec::new(),
                std: 1.0,
            },
        };
        net.block = match prior {
            WeightPrior::Hierarchical => PriorBlock {
                indices: vec![0, 1],
                std: 10.0,
            },
            WeightPrior::Fixed => PriorBlock {
                indices: (0..net.dim()).collect(),
                std: 5.0,
            },
        };
        Ok(net)
    }

    fn inputs(&self) -> usize {
        self.features[0].len()
    }

    fn weights_offset(&self) -> usize {
        match self.prior {
            WeightPrior::Hierarchical => 2,
            WeightPrior::Fixed => 1,
        }
    }

    fn log_tau_index(&self) -> usize {
        self.weights_offset() - 1
    }

    fn n_weights(&self) -> usize {
        let (h, d) = (self.hidden, self.inputs());
        h * d + h + h + 1
    }

    /// Step for the finite-difference Hessian-vector product.
    pub fn hvp_step(z: &[f64]) -> f64 {
        1e-4 * (1.0 + z.iter().map(|v| v * v).sum::<f64>().sqrt())
    }
}

impl ModelSpec for BayesianNeuralNet {
    fn name(&self) -> &str {
        match self.prior {
            WeightPrior::Hierarchical => "bnn_a",
            WeightPrior::Fixed => "bnn_b",
        }
    }

    fn dim(&self) -> usize {
        self.weights_offset() + self.n_weights()
    }

    fn log_joint(&self, z: &[f64]) -> f64 {
        self.log_joint_and_grad(z).0
    }

    fn log_joint_and_grad(&self, z: &[f64]) -> (f64, Vec<f64>) {
        let (h, d) = (self.hidden, self.inputs());
        let off = self.weights_offset();
        let w1 = &z[off..off + h * d];
        let b1 = &z[off + h * d..off + h * d + h];
        let w2 = &z[off + h * d + h..off + h * d + 2 * h];
        let b2 = z[off + h * d + 2 * h];
        let log_tau = z[self.log_tau_index()];
        let prec = (-2.0 * log_tau).exp();

        let mut grad = vec![0.0; self.dim()];
        let mut value = 0.0;
        let mut act = vec![0.0; h];
        {
            let (head, tail) = grad.split_at_mut(off);
            let (gw1, rest) = tail.split_at_mut(h * d);
            let (gb1, rest) = rest.split_at_mut(h);
            let (gw2, gb2) = rest.split_at_mut(h);
            for (x, &y) in self.features.iter().zip(&self.targets) {
                for (k, a) in act.iter_mut().enumerate() {
                    let pre = b1[k] + dot(&w1[k * d..(k + 1) * d], x);
                    *a = pre.max(0.0);
                }
                let yhat = b2 + dot(w2, &act);
                let r = y - yhat;
                value += -0.5 * LN_2PI - log_tau - 0.5 * r * r * prec;
                head[self.log_tau_index()] += -1.0 + r * r * prec;
                let delta = r * prec;
                gb2[0] += delta;
                for k in 0..h {
                    gw2[k] += delta * act[k];
                    if act[k] > 0.0 {
                        let dpre = delta * w2[k];
                        gb1[k] += dpre;
                        for (g, xi) in gw1[k * d..(k + 1) * d].iter_mut().zip(x) {
                            *g += dpre * xi;
                        }
                    }
                }
            }
        }

        let weights = &z[off..];
        match self.prior {
            WeightPrior::Hierarchical => {
                let log_alpha = z[0];
                let pa = (-2.0 * log_alpha).exp();
                let n = weights.len() as f64;
                let sq: f64 = weights.iter().map(|w| w * w).sum();
                value += -0.5 * n * LN_2PI - n * log_alpha - 0.5 * sq * pa;
                grad[0] += -n + sq * pa;
                for (g, w) in grad[off..].iter_mut().zip(weights) {
                    *g -= w * pa;
                }
                let (hv, hg) = gaussian_prior_log_density(z, &self.block);
                value += hv;
                grad[0] += hg[0];
                grad[1] += hg[1];
            }
            WeightPrior::Fixed => {
                let (pv, pg) = gaussian_prior_log_density(z, &self.block);
                value += pv;
                for (g, p) in grad.iter_mut().zip(pg) {
                    *g += p;
                }
            }
        }
        (value, grad)
    }

    fn grad(&self, z: &[f64]) -> Vec<f64> {
        self.log_joint_and_grad(z).1
    }

    fn hvp(&self, z: &[f64], v: &[f64]) -> Vec<f64> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return vec![0.0; v.len()];
        }
        let unit: Vec<f64> = v.iter().map(|x| x / norm).collect();
        hvp_finite_difference(|p| self.grad(p), z, &unit, Self::hvp_step(z))
            .into_iter()
            .map(|x| x * norm)
            .collect()
    }

    fn gaussian_prior_block(&self) -> Option<&PriorBlock> {
        Some(&self.block)
    }
}
