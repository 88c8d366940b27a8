//! Cost-aware gradient estimator selection for Gaussian variational inference.
//!
//! Estimators are ranked by `G² · T`: the expected squared norm of the
//! gradient estimate times the wall-clock cost of drawing it. The crate
//! provides the convergence bounds behind that ranking ([`bounds`]), the
//! variational families and models ([`vi`]), base and control-variate
//! gradient estimators ([`estimators`]), the subset selector
//! ([`selection`]) and the end-to-end optimization driver ([`experiment`]).

// `!(x >= 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod clock;
pub mod data;
pub mod estimators;
pub mod experiment;
pub mod rng;
pub mod selection;
pub mod vi;

#[cfg(test)]
pub(crate) mod testutil {
    /// Central-difference gradient of `f` at `x`.
    pub fn central_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut xp = x.to_vec();
        (0..x.len())
            .map(|i| {
                let orig = xp[i];
                xp[i] = orig + h;
                let up = f(&xp);
                xp[i] = orig - h;
                let down = f(&xp);
                xp[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    /// `‖a − b‖ / max(‖b‖, 1e-8)`.
    pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        assert_eq!(a.len(), b.len());
        let diff: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        diff / norm.max(1e-8)
    }

    /// Sample mean and its standard error.
    pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        (mean, (var / n).sqrt())
    }
}
