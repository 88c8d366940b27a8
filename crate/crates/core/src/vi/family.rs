//! Gaussian variational families `q_w = N(mu, L Lᵀ)` sampled as `z = mu + L xi`.
//!
//! Flat parameter layout (shared by every gradient in the crate):
//!
//! * mean block: `mu[0..d]`
//! * diagonal family: `rho[0..d]` with `sigma_i = exp(rho_i)`
//! * full-rank family: the lower triangle of `L`, row-major
//!   (`(0,0), (1,0), (1,1), (2,0), ...`), where diagonal entries are stored as
//!   `log L_ii` and off-diagonal entries raw.

use serde::{Deserialize, Serialize};

use super::ViError;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Diagonal,
    FullRank,
}

/// Offset of `L_ij` (`j <= i`) inside the packed lower triangle.
#[inline]
pub fn packed_index(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Scale {
    DiagLogStd(Vec<f64>),
    /// Packed lower triangle, log-diagonal.
    Cholesky(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariationalParams {
    mean: Vec<f64>,
    scale: Scale,
    // exp'd diagonal (diag family) or packed L with the diagonal exponentiated
    factor: Vec<f64>,
}

impl VariationalParams {
    pub fn new(mean: Vec<f64>, scale: Scale) -> Result<Self, ViError> {
        let d = mean.len();
        let expected = match &scale {
            Scale::DiagLogStd(_) => d,
            Scale::Cholesky(_) => d * (d + 1) / 2,
        };
        let got = match &scale {
            Scale::DiagLogStd(r) => r.len(),
            Scale::Cholesky(p) => p.len(),
        };
        if got != expected {
            return Err(ViError::DimensionMismatch { expected, got });
        }
        let mut params = Self {
            mean,
            scale,
            factor: Vec::new(),
        };
        params.refresh();
        if params
            .mean
            .iter()
            .chain(params.factor.iter())
            .any(|v| !v.is_finite())
        {
            return Err(ViError::Domain(
                "variational parameters must be finite".into(),
            ));
        }
        Ok(params)
    }

    pub fn diagonal(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self, ViError> {
        Self::new(mean, Scale::DiagLogStd(log_std))
    }

    /// Full-rank family from a dense lower-triangular factor with positive diagonal.
    pub fn full_rank(mean: Vec<f64>, factor: &[Vec<f64>]) -> Result<Self, ViError> {
        let d = mean.len();
        if factor.len() != d {
            return Err(ViError::DimensionMismatch {
                expected: d,
                got: factor.len(),
            });
        }
        let mut packed = Vec::with_capacity(d * (d + 1) / 2);
        for (i, row) in factor.iter().enumerate() {
            if row.len() < i + 1 {
                return Err(ViError::DimensionMismatch {
                    expected: i + 1,
                    got: row.len(),
                });
            }
            for (j, &v) in row.iter().take(i + 1).enumerate() {
                if i == j {
                    if !(v > 0.0) {
                        return Err(ViError::Domain(format!(
                            "factor diagonal {i} must be positive"
                        )));
                    }
                    packed.push(v.ln());
                } else {
                    packed.push(v);
                }
            }
        }
        Self::new(mean, Scale::Cholesky(packed))
    }

    /// `N(mean, exp(log_std)² I)` in the requested family.
    pub fn isotropic(mean: Vec<f64>, log_std: f64, family: Family) -> Self {
        let d = mean.len();
        let scale = match family {
            Family::Diagonal => Scale::DiagLogStd(vec![log_std; d]),
            Family::FullRank => {
                let mut packed = vec![0.0; d * (d + 1) / 2];
                for i in 0..d {
                    packed[packed_index(i, i)] = log_std;
                }
                Scale::Cholesky(packed)
            }
        };
        Self::new(mean, scale).expect("isotropic parameters are well formed")
    }

    /// Rebuilds parameters from a flat vector in the documented layout.
    pub fn from_flat(family: Family, dim: usize, flat: &[f64]) -> Result<Self, ViError> {
        let expected = Self::flat_len(family, dim);
        if flat.len() != expected {
            return Err(ViError::DimensionMismatch {
                expected,
                got: flat.len(),
            });
        }
        let mean = flat[..dim].to_vec();
        let rest = flat[dim..].to_vec();
        let scale = match family {
            Family::Diagonal => Scale::DiagLogStd(rest),
            Family::FullRank => Scale::Cholesky(rest),
        };
        Self::new(mean, scale)
    }

    pub fn flat_len(family: Family, dim: usize) -> usize {
        match family {
            Family::Diagonal => 2 * dim,
            Family::FullRank => dim + dim * (dim + 1) / 2,
        }
    }

    fn refresh(&mut self) {
        self.factor = match &self.scale {
            Scale::DiagLogStd(rho) => rho.iter().map(|r| r.exp()).collect(),
            Scale::Cholesky(packed) => {
                let mut f = packed.clone();
                for i in 0..self.mean.len() {
                    let k = packed_index(i, i);
                    f[k] = f[k].exp();
                }
                f
            }
        };
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn family(&self) -> Family {
        match self.scale {
            Scale::DiagLogStd(_) => Family::Diagonal,
            Scale::Cholesky(_) => Family::FullRank,
        }
    }

    /// Length of the flat parameter / gradient vector.
    pub fn n_params(&self) -> usize {
        Self::flat_len(self.family(), self.dim())
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn scale(&self) -> &Scale {
        &self.scale
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = self.mean.clone();
        match &self.scale {
            Scale::DiagLogStd(r) => out.extend_from_slice(r),
            Scale::Cholesky(p) => out.extend_from_slice(p),
        }
        out
    }

    /// `w <- w + step * direction` in flat coordinates.
    pub fn add_scaled(&mut self, step: f64, direction: &[f64]) -> Result<(), ViError> {
        if direction.len() != self.n_params() {
            return Err(ViError::DimensionMismatch {
                expected: self.n_params(),
                got: direction.len(),
            });
        }
        let d = self.dim();
        for (m, g) in self.mean.iter_mut().zip(&direction[..d]) {
            *m += step * g;
        }
        let raw = match &mut self.scale {
            Scale::DiagLogStd(r) => r,
            Scale::Cholesky(p) => p,
        };
        for (s, g) in raw.iter_mut().zip(&direction[d..]) {
            *s += step * g;
        }
        self.refresh();
        Ok(())
    }

    /// `L_ij` with the diagonal in natural (not log) units.
    #[inline]
    pub fn factor_entry(&self, i: usize, j: usize) -> f64 {
        match self.scale {
            Scale::DiagLogStd(_) => {
                if i == j {
                    self.factor[i]
                } else {
                    0.0
                }
            }
            Scale::Cholesky(_) => {
                if j <= i {
                    self.factor[packed_index(i, j)]
                } else {
                    0.0
                }
            }
        }
    }

    /// Dense copy of `L`.
    pub fn factor_matrix(&self) -> Vec<Vec<f64>> {
        let d = self.dim();
        (0..d)
            .map(|i| (0..d).map(|j| self.factor_entry(i, j)).collect())
            .collect()
    }

    /// Standard deviations for the diagonal family, `L_ii` for the full-rank one.
    pub fn factor_diagonal(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.factor_entry(i, i)).collect()
    }

    /// `Var_q(z_i) = sum_j L_ij²`.
    pub fn marginal_variances(&self) -> Vec<f64> {
        match self.scale {
            Scale::DiagLogStd(_) => self.factor.iter().map(|s| s * s).collect(),
            Scale::Cholesky(_) => (0..self.dim())
                .map(|i| {
                    let row = &self.factor[packed_index(i, 0)..=packed_index(i, i)];
                    row.iter().map(|v| v * v).sum()
                })
                .collect(),
        }
    }

    fn check_dim(&self, v: &[f64]) -> Result<(), ViError> {
        if v.len() != self.dim() {
            return Err(ViError::DimensionMismatch {
                expected: self.dim(),
                got: v.len(),
            });
        }
        Ok(())
    }

    /// `L v`
    pub fn apply_factor(&self, v: &[f64]) -> Vec<f64> {
        match self.scale {
            Scale::DiagLogStd(_) => self.factor.iter().zip(v).map(|(s, x)| s * x).collect(),
            Scale::Cholesky(_) => (0..self.dim())
                .map(|i| {
                    let row = &self.factor[packed_index(i, 0)..=packed_index(i, i)];
                    row.iter().zip(v).map(|(l, x)| l * x).sum()
                })
                .collect(),
        }
    }

    /// Solves `L x = b` by forward substitution.
    pub fn solve_factor(&self, b: &[f64]) -> Vec<f64> {
        match self.scale {
            Scale::DiagLogStd(_) => b.iter().zip(&self.factor).map(|(x, s)| x / s).collect(),
            Scale::Cholesky(_) => {
                let d = self.dim();
                let mut x = vec![0.0; d];
                for i in 0..d {
                    let row = &self.factor[packed_index(i, 0)..=packed_index(i, i)];
                    let acc: f64 = row[..i].iter().zip(&x[..i]).map(|(l, v)| l * v).sum();
                    x[i] = (b[i] - acc) / row[i];
                }
                x
            }
        }
    }

    /// Solves `Lᵀ x = b` by back substitution.
    pub fn solve_factor_transpose(&self, b: &[f64]) -> Vec<f64> {
        match self.scale {
            Scale::DiagLogStd(_) => b.iter().zip(&self.factor).map(|(x, s)| x / s).collect(),
            Scale::Cholesky(_) => {
                let d = self.dim();
                let mut x = b.to_vec();
                for i in (0..d).rev() {
                    x[i] /= self.factor[packed_index(i, i)];
                    let xi = x[i];
                    for (j, xj) in x.iter_mut().enumerate().take(i) {
                        *xj -= self.factor[packed_index(i, j)] * xi;
                    }
                }
                x
            }
        }
    }

    /// `z = mu + L xi`
    pub fn transform(&self, xi: &[f64]) -> Result<Vec<f64>, ViError> {
        self.check_dim(xi)?;
        Ok(self.transform_unchecked(xi))
    }

    pub(crate) fn transform_unchecked(&self, xi: &[f64]) -> Vec<f64> {
        let mut z = self.apply_factor(xi);
        for (zi, m) in z.iter_mut().zip(&self.mean) {
            *zi += m;
        }
        z
    }

    /// Sum of `log L_ii`.
    pub fn log_det_factor(&self) -> f64 {
        match &self.scale {
            Scale::DiagLogStd(r) => r.iter().sum(),
            Scale::Cholesky(p) => (0..self.dim()).map(|i| p[packed_index(i, i)]).sum(),
        }
    }

    /// Closed-form entropy and its flat gradient (1 on every log-diagonal
    /// coordinate, 0 elsewhere).
    pub fn entropy_and_grad(&self) -> (f64, Vec<f64>) {
        let d = self.dim() as f64;
        let h = self.log_det_factor() + 0.5 * d * (LN_2PI + 1.0);
        (h, self.entropy_grad())
    }

    pub fn entropy_grad(&self) -> Vec<f64> {
        let d = self.dim();
        let mut g = vec![0.0; self.n_params()];
        match self.scale {
            Scale::DiagLogStd(_) => g[d..].iter_mut().for_each(|v| *v = 1.0),
            Scale::Cholesky(_) => (0..d).for_each(|i| g[d + packed_index(i, i)] = 1.0),
        }
        g
    }

    /// Gaussian log density at `z` and its gradient `-Σ⁻¹(z - mu)`.
    pub fn log_q_and_grad_z(&self, z: &[f64]) -> Result<(f64, Vec<f64>), ViError> {
        self.check_dim(z)?;
        let centered: Vec<f64> = z.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        let white = self.solve_factor(&centered);
        let quad: f64 = white.iter().map(|v| v * v).sum();
        let logq = -0.5 * self.dim() as f64 * LN_2PI - self.log_det_factor() - 0.5 * quad;
        let grad = self
            .solve_factor_transpose(&white)
            .into_iter()
            .map(|v| -v)
            .collect();
        Ok((logq, grad))
    }

    /// Chain rule of a z-gradient through `z = mu + L xi`, giving a flat gradient.
    pub fn pullback(&self, xi: &[f64], grad_z: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut out = Vec::with_capacity(self.n_params());
        out.extend_from_slice(grad_z);
        match self.scale {
            Scale::DiagLogStd(_) => {
                out.extend((0..d).map(|i| grad_z[i] * self.factor[i] * xi[i]));
            }
            Scale::Cholesky(_) => {
                for i in 0..d {
                    for j in 0..i {
                        out.push(grad_z[i] * xi[j]);
                    }
                    out.push(grad_z[i] * xi[i] * self.factor[packed_index(i, i)]);
                }
            }
        }
        out
    }

    /// Path-only gradient of `log q_v(T_w(xi))` with the density parameters `v`
    /// frozen at `w`: `∇_z log q = -L⁻ᵀ xi`, pulled back through `T_w`.
    pub fn path_grad_log_q(&self, xi: &[f64]) -> Result<Vec<f64>, ViError> {
        self.check_dim(xi)?;
        Ok(self.path_grad_log_q_unchecked(xi))
    }

    pub(crate) fn path_grad_log_q_unchecked(&self, xi: &[f64]) -> Vec<f64> {
        let gz: Vec<f64> = self
            .solve_factor_transpose(xi)
            .into_iter()
            .map(|v| -v)
            .collect();
        self.pullback(xi, &gz)
    }
}
