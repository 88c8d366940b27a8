//! Cost and squared-norm estimation, pool selection, and exact control-variate
//! weight selection.
//!
//! Costs are measured per estimator evaluation on an unloaded thread. The
//! squared-norm statistics are gathered once per selection from `M` shared
//! draws and then reused to score every candidate weight vector:
//! `Ĝ²(a) = u + rᵀa + ½ aᵀQa`.

mod miqcp;
mod solve;

use std::error::Error as StdError;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::rng::{map_indexed, normal_draw, Execution};

pub use miqcp::{export_miqcp, parse_miqcp, MiqcpProblem, VarType};
pub use solve::{
    minimum_variance_weights, reselection_schedule, solve_support_enumeration, Support,
    MAX_ENUMERATION_J,
};

/// Default number of draws for Ĝ² estimation.
pub const DEFAULT_M: usize = 400;
/// Draws used for full-rank logistic-regression configurations.
pub const DEFAULT_M_FULL_RANK_LOGREG: usize = 200;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("invalid input: {0}")]
    Domain(String),
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("estimator pool is empty")]
    EmptyPool,
    #[error("evaluation failed: {0}")]
    Evaluation(#[source] Box<dyn StdError + Send + Sync>),
    #[error("malformed MIQCP export, line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// `t0` seconds per base evaluation and marginal seconds `t_i` per control variate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostProfile {
    pub t0: f64,
    pub t: Vec<f64>,
}

impl CostProfile {
    pub fn new(t0: f64, t: Vec<f64>) -> Result<Self, SelectionError> {
        if !(t0 > 0.0 && t0.is_finite()) {
            return Err(SelectionError::Domain(format!(
                "t0 must be positive, got {t0}"
            )));
        }
        if t.iter().any(|v| !v.is_finite()) {
            return Err(SelectionError::Domain(
                "marginal costs must be finite".into(),
            ));
        }
        Ok(Self {
            t0,
            t: t.into_iter().map(|v| v.max(0.0)).collect(),
        })
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            t0: self.t0 * c,
            t: self.t.iter().map(|v| v * c).collect(),
        }
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median duration of `reps` timed calls after `warmup` untimed ones.
///
/// Runs on the calling thread; callers must keep the process otherwise idle.
pub fn profile_cost<C, F, E>(
    clock: &C,
    mut evaluable: F,
    warmup: usize,
    reps: usize,
) -> Result<f64, SelectionError>
where
    C: Clock + ?Sized,
    F: FnMut() -> Result<(), E>,
    E: Into<Box<dyn StdError + Send + Sync>>,
{
    if warmup < 1 || reps < 3 {
        return Err(SelectionError::Domain(format!(
            "need warmup >= 1 and reps >= 3, got {warmup} and {reps}"
        )));
    }
    for _ in 0..warmup {
        evaluable().map_err(|e| SelectionError::Evaluation(e.into()))?;
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = clock.now();
        evaluable().map_err(|e| SelectionError::Evaluation(e.into()))?;
        times.push(clock.now() - start);
    }
    Ok(median(times))
}

/// Base cost and marginal costs of each `base + c_i` evaluable.
pub fn profile_cv_costs<C, F, E>(
    clock: &C,
    base: F,
    with_cv: Vec<F>,
    warmup: usize,
    reps: usize,
) -> Result<CostProfile, SelectionError>
where
    C: Clock + ?Sized,
    F: FnMut() -> Result<(), E>,
    E: Into<Box<dyn StdError + Send + Sync>>,
{
    let t0 = profile_cost(clock, base, warmup, reps)?;
    if !(t0 > 0.0) {
        return Err(SelectionError::Domain(
            "measured base cost is zero; clock resolution too coarse".into(),
        ));
    }
    let mut t = Vec::with_capacity(with_cv.len());
    for f in with_cv {
        t.push((profile_cost(clock, f, warmup, reps)? - t0).max(0.0));
    }
    CostProfile::new(t0, t)
}

fn squared_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// `(1/M) Σ ‖g(ξ_m)‖²` over draws `m = 0..M` of the stream `seed`.
pub fn estimate_g2<F>(
    eval: F,
    dim: usize,
    m: usize,
    seed: u64,
    exec: Execution,
) -> Result<f64, SelectionError>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync + Send,
{
    if m == 0 {
        return Err(SelectionError::Domain("M must be >= 1".into()));
    }
    let norms = map_indexed(m, exec, |i| squared_norm(&eval(&normal_draw(seed, i, dim))));
    Ok(norms.iter().sum::<f64>() / m as f64)
}

/// One candidate of finite-pool selection.
pub struct PoolMember<'a> {
    pub label: String,
    pub eval: &'a (dyn Fn(&[f64]) -> Vec<f64> + Sync),
    /// Seconds per evaluation.
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSelection {
    pub index: usize,
    pub label: String,
    pub g2: Vec<f64>,
    pub scores: Vec<f64>,
}

/// Argmin of `Ĝ² · T̂` over the pool, all members sharing one noise stream;
/// ties go to the lowest index.
pub fn select_from_pool(
    pool: &[PoolMember<'_>],
    dim: usize,
    m: usize,
    seed: u64,
    exec: Execution,
) -> Result<PoolSelection, SelectionError> {
    if pool.is_empty() {
        return Err(SelectionError::EmptyPool);
    }
    if let Some(bad) = pool.iter().find(|p| !(p.cost > 0.0 && p.cost.is_finite())) {
        return Err(SelectionError::Domain(format!(
            "pool member {} has invalid cost {}",
            bad.label, bad.cost
        )));
    }
    let mut g2 = Vec::with_capacity(pool.len());
    for member in pool {
        g2.push(estimate_g2(member.eval, dim, m, seed, exec)?);
    }
    let scores: Vec<f64> = g2.iter().zip(pool).map(|(g, p)| g * p.cost).collect();
    let mut index = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s < scores[index] {
            index = i;
        }
    }
    Ok(PoolSelection {
        index,
        label: pool[index].label.clone(),
        g2,
        scores,
    })
}

/// Sufficient statistics of `Ĝ²(a) = (1/M) Σ_m ‖g_m + C_m a‖²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquaredNormStats {
    pub u: f64,
    pub r: Vec<f64>,
    pub q: Vec<Vec<f64>>,
    pub m: usize,
}

struct SampleTerms {
    u: f64,
    r: Vec<f64>,
    q: Vec<f64>,
}

fn sample_terms(g: &[f64], cs: &[Vec<f64>]) -> SampleTerms {
    let j = cs.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let r = cs.iter().map(|c| dot(c, g)).collect();
    let mut q = vec![0.0; j * j];
    for a in 0..j {
        for b in a..j {
            let v = dot(&cs[a], &cs[b]);
            q[a * j + b] = v;
            q[b * j + a] = v;
        }
    }
    SampleTerms { u: dot(g, g), r, q }
}

impl SquaredNormStats {
    pub fn j(&self) -> usize {
        self.r.len()
    }

    /// Statistics of explicit samples `(g_m, [c_1m, ..., c_Jm])`.
    pub fn from_samples(samples: &[(Vec<f64>, Vec<Vec<f64>>)]) -> Result<Self, SelectionError> {
        let first = samples
            .first()
            .ok_or_else(|| SelectionError::Domain("no samples".into()))?;
        let j = first.1.len();
        let terms: Vec<SampleTerms> = samples
            .iter()
            .map(|(g, cs)| {
                if cs.len() != j {
                    return Err(SelectionError::LengthMismatch {
                        expected: j,
                        got: cs.len(),
                    });
                }
                if let Some(c) = cs.iter().find(|c| c.len() != g.len()) {
                    return Err(SelectionError::LengthMismatch {
                        expected: g.len(),
                        got: c.len(),
                    });
                }
                Ok(sample_terms(g, cs))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self::fold(j, terms))
    }

    fn fold(j: usize, terms: Vec<SampleTerms>) -> Self {
        let m = terms.len();
        let mut u = 0.0;
        let mut r = vec![0.0; j];
        let mut q = vec![0.0; j * j];
        for t in &terms {
            u += t.u;
            r.iter_mut().zip(&t.r).for_each(|(a, b)| *a += b);
            q.iter_mut().zip(&t.q).for_each(|(a, b)| *a += b);
        }
        let mf = m as f64;
        Self {
            u: u / mf,
            r: r.into_iter().map(|v| 2.0 * v / mf).collect(),
            q: q.chunks(j.max(1))
                .take(j)
                .map(|row| row.iter().map(|v| 2.0 * v / mf).collect())
                .collect(),
            m,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite()
            && self.r.iter().all(|v| v.is_finite())
            && self.q.iter().flatten().all(|v| v.is_finite())
    }

    pub fn trace_q(&self) -> f64 {
        (0..self.j()).map(|i| self.q[i][i]).sum()
    }
}

/// Statistics from `M` shared draws of the base estimator and every control variate.
pub fn collect_quadratic_stats<F, G>(
    base: F,
    cvs: &[G],
    dim: usize,
    m: usize,
    seed: u64,
    exec: Execution,
) -> Result<SquaredNormStats, SelectionError>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync + Send,
    G: Fn(&[f64]) -> Vec<f64> + Sync + Send,
{
    if m == 0 {
        return Err(SelectionError::Domain("M must be >= 1".into()));
    }
    let terms = map_indexed(m, exec, |i| {
        let xi = normal_draw(seed, i, dim);
        let g = base(&xi);
        let cs: Vec<Vec<f64>> = cvs.iter().map(|c| c(&xi)).collect();
        sample_terms(&g, &cs)
    });
    Ok(SquaredNormStats::fold(cvs.len(), terms))
}

/// `u + rᵀa + ½ aᵀQa`.
pub fn g2_of_weights(stats: &SquaredNormStats, a: &[f64]) -> Result<f64, SelectionError> {
    let j = stats.j();
    if a.len() != j {
        return Err(SelectionError::LengthMismatch {
            expected: j,
            got: a.len(),
        });
    }
    let lin: f64 = stats.r.iter().zip(a).map(|(r, x)| r * x).sum();
    let mut quad = 0.0;
    for (row, ai) in stats.q.iter().zip(a) {
        quad += ai * row.iter().zip(a).map(|(q, x)| q * x).sum::<f64>();
    }
    Ok(stats.u + lin + 0.5 * quad)
}

/// `t0 + Σ_{i ∈ S} t_i`.
pub fn time_of_support(profile: &CostProfile, support: Support) -> Result<f64, SelectionError> {
    let j = profile.t.len();
    if let Some(bad) = support.indices().into_iter().find(|&i| i >= j) {
        return Err(SelectionError::Domain(format!(
            "support index {} out of range for J = {j}",
            bad + 1
        )));
    }
    Ok(profile.t0
        + support
            .indices()
            .into_iter()
            .map(|i| profile.t[i])
            .sum::<f64>())
}

/// The chosen support, its weights, and the predicted `Ĝ²`, `T̂` and score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionDecision {
    pub support: Support,
    pub weights: Vec<f64>,
    pub g2hat: f64,
    pub that: f64,
    pub score: f64,
}
