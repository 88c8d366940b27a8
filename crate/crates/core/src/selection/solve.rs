use std::cmp::Ordering;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{
    g2_of_weights, time_of_support, CostProfile, SelectionDecision, SelectionError,
    SquaredNormStats,
};

/// Largest number of control variates the exhaustive solver accepts.
pub const MAX_ENUMERATION_J: usize = 20;

/// A subset of control variates; bit `i` stands for `c_{i+1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Support {
    pub bits: u32,
    pub j: usize,
}

impl Support {
    pub fn empty(j: usize) -> Self {
        Self { bits: 0, j }
    }

    pub fn full(j: usize) -> Self {
        Self {
            bits: if j == 0 { 0 } else { u32::MAX >> (32 - j) },
            j,
        }
    }

    /// From 0-based indices.
    pub fn from_indices(j: usize, indices: &[usize]) -> Self {
        Self {
            bits: indices.iter().fold(0, |acc, &i| acc | (1 << i)),
            j,
        }
    }

    /// Non-zero entries of `weights`.
    pub fn of_weights(weights: &[f64]) -> Self {
        let idx: Vec<usize> = weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w != 0.0)
            .map(|(i, _)| i)
            .collect();
        Self::from_indices(weights.len(), &idx)
    }

    pub fn contains(&self, i: usize) -> bool {
        self.bits & (1 << i) != 0
    }

    /// 0-based indices in increasing order.
    pub fn indices(&self) -> Vec<usize> {
        (0..32).filter(|&i| self.contains(i)).collect()
    }

    pub fn size(&self) -> usize {
        self.bits.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.bits == 0
    }

    /// Parses the rendering of [`fmt::Display`], e.g. `"101"`.
    pub fn parse(s: &str) -> Option<Self> {
        let mut bits = 0;
        for (i, ch) in s.chars().enumerate() {
            match ch {
                '1' => bits |= 1 << i,
                '0' => {}
                _ => return None,
            }
        }
        (s.len() <= 32).then_some(Self { bits, j: s.len() })
    }

    /// Smaller supports first, then lexicographically by index list.
    fn tie_order(&self, other: &Self) -> Ordering {
        self.size()
            .cmp(&other.size())
            .then_with(|| self.indices().cmp(&other.indices()))
    }
}

/// `"101"` means `c1` and `c3` are in use.
impl fmt::Display for Support {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.j {
            f.write_str(if self.contains(i) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

fn ridge(stats: &SquaredNormStats) -> f64 {
    let j = stats.j().max(1) as f64;
    1e-8 * (stats.trace_q() / j).max(1.0)
}

/// Minimizer of `Ĝ²(a)` with `a` restricted to `support` (zeros elsewhere),
/// solved on the ridge-regularized block `Q_SS + δI`.
fn restricted_minimizer(stats: &SquaredNormStats, support: Support, delta: f64) -> Vec<f64> {
    let idx = support.indices();
    let k = idx.len();
    let mut a = vec![0.0; stats.j()];
    if k == 0 {
        return a;
    }
    let q = DMatrix::from_fn(k, k, |r, c| {
        stats.q[idx[r]][idx[c]] + if r == c { delta } else { 0.0 }
    });
    let rhs = DVector::from_iterator(k, idx.iter().map(|&i| -stats.r[i]));
    let sol = match q.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        // an indefinite sample matrix (roundoff) still has a usable LU solve
        None => q.lu().solve(&rhs).unwrap_or_else(|| DVector::zeros(k)),
    };
    for (pos, &i) in idx.iter().enumerate() {
        a[i] = sol[pos];
    }
    a
}

fn check_stats(stats: &SquaredNormStats) -> Result<(), SelectionError> {
    if !stats.is_finite() {
        return Err(SelectionError::Domain(
            "squared-norm statistics contain non-finite entries".into(),
        ));
    }
    let j = stats.j();
    if stats.q.len() != j || stats.q.iter().any(|row| row.len() != j) {
        return Err(SelectionError::LengthMismatch {
            expected: j,
            got: stats.q.len(),
        });
    }
    Ok(())
}

/// Weights minimizing the `Ĝ²` estimate on a fixed, non-empty support.
///
/// If `Q_SS` is singular even after the ridge, the ridge solution is returned.
pub fn minimum_variance_weights(
    stats: &SquaredNormStats,
    support: Support,
) -> Result<Vec<f64>, SelectionError> {
    check_stats(stats)?;
    if support.is_empty() {
        return Err(SelectionError::Domain("support must be non-empty".into()));
    }
    if support.indices().iter().any(|&i| i >= stats.j()) {
        return Err(SelectionError::Domain("support index out of range".into()));
    }
    Ok(restricted_minimizer(stats, support, ridge(stats)))
}

/// Exact minimizer of `Ĝ²(a) · T̂(a)` by enumerating all `2^J` supports.
pub fn solve_support_enumeration(
    stats: &SquaredNormStats,
    profile: &CostProfile,
) -> Result<SelectionDecision, SelectionError> {
    check_stats(stats)?;
    let j = stats.j();
    if profile.t.len() != j {
        return Err(SelectionError::LengthMismatch {
            expected: j,
            got: profile.t.len(),
        });
    }
    if j > MAX_ENUMERATION_J {
        return Err(SelectionError::Domain(format!(
            "J = {j} exceeds the enumeration limit {MAX_ENUMERATION_J}"
        )));
    }
    let delta = ridge(stats);
    let mut best: Option<SelectionDecision> = None;
    for bits in 0..(1u32 << j) {
        let support = Support { bits, j };
        let weights = restricted_minimizer(stats, support, delta);
        let g2hat = g2_of_weights(stats, &weights)?.max(0.0);
        let that = time_of_support(profile, support)?;
        let candidate = SelectionDecision {
            support,
            weights,
            g2hat,
            that,
            score: g2hat * that,
        };
        best = Some(match best {
            None => candidate,
            Some(cur) => match candidate.score.total_cmp(&cur.score) {
                Ordering::Less => candidate,
                Ordering::Equal if candidate.support.tie_order(&cur.support) == Ordering::Less => {
                    candidate
                }
                _ => cur,
            },
        });
    }
    Ok(best.expect("at least the empty support"))
}

/// Wall-clock times `fraction · budget` at which to re-select.
pub fn reselection_schedule(
    time_budget: f64,
    fractions: &[f64],
) -> Result<Vec<f64>, SelectionError> {
    if !(time_budget > 0.0 && time_budget.is_finite()) {
        return Err(SelectionError::Domain(format!(
            "time budget must be positive, got {time_budget}"
        )));
    }
    if let Some(f) = fractions.iter().find(|f| !(0.0..1.0).contains(*f)) {
        return Err(SelectionError::Domain(format!(
            "reselection fraction {f} outside [0, 1)"
        )));
    }
    if fractions.windows(2).any(|w| w[1] <= w[0]) {
        return Err(SelectionError::Domain(
            "reselection fractions must be strictly increasing".into(),
        ));
    }
    Ok(fractions.iter().map(|f| f * time_budget).collect())
}
