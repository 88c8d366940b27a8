//! Closed-form SGD convergence guarantees and the G²T ranking rule.
//!
//! Every guarantee has the shape `alpha(lambda, L, C) * (G² / K)^p`, with
//! `p = 1` for the strongly convex rows and `p = 1/2` otherwise. Plugging
//! `K = T_opt / T(g)` in shows that the only estimator-dependent factor is
//! `(G² · T)^p`, which is what [`rank_by_g2t`] orders by.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoundsError {
    #[error("row {row} requires {requirement}")]
    AssumptionViolation { row: Row, requirement: &'static str },
    #[error("invalid input: {0}")]
    Domain(String),
}

/// Structural properties of the objective: strong-convexity modulus,
/// smoothness constant and convexity flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveClass {
    lambda: f64,
    smooth_l: Option<f64>,
    convex: bool,
}

impl ObjectiveClass {
    /// `smooth_l = None` marks an objective that is not known to be smooth.
    pub fn new(lambda: f64, smooth_l: Option<f64>, convex: bool) -> Result<Self, BoundsError> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(BoundsError::Domain(format!(
                "lambda must be >= 0, got {lambda}"
            )));
        }
        if lambda > 0.0 && !convex {
            return Err(BoundsError::Domain(
                "a strongly convex objective must be flagged convex".into(),
            ));
        }
        if let Some(l) = smooth_l {
            if !(l > 0.0) || !l.is_finite() {
                return Err(BoundsError::Domain(format!(
                    "L must be positive and finite, got {l}"
                )));
            }
        }
        Ok(Self {
            lambda,
            smooth_l,
            convex,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn smooth_l(&self) -> Option<f64> {
        self.smooth_l
    }

    pub fn convex(&self) -> bool {
        self.convex
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundQuery {
    pub objective: ObjectiveClass,
    pub iterations: u64,
    pub g2: f64,
    pub beta: f64,
    /// `F(w0) - F(w*)`
    pub df: f64,
    /// `||w0 - w*||`
    pub dw: f64,
}

impl BoundQuery {
    pub fn new(objective: ObjectiveClass, iterations: u64, g2: f64) -> Self {
        Self {
            objective,
            iterations,
            g2,
            beta: 0.0,
            df: 0.0,
            dw: 0.0,
        }
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn with_df(mut self, df: f64) -> Self {
        self.df = df;
        self
    }

    pub fn with_dw(mut self, dw: f64) -> Self {
        self.dw = dw;
        self
    }

    /// Same query with `K` derived from a time budget: `floor(t_opt / cost)`, at least 1.
    pub fn with_time_budget(mut self, t_opt: f64, cost: f64) -> Result<Self, BoundsError> {
        self.iterations = iterations_for_budget(t_opt, cost)?;
        Ok(self)
    }

    fn validate(&self) -> Result<(), BoundsError> {
        if self.iterations == 0 {
            return Err(BoundsError::Domain("K must be >= 1".into()));
        }
        if !(self.g2 >= 0.0) || !self.g2.is_finite() {
            return Err(BoundsError::Domain(format!(
                "G² must be >= 0, got {}",
                self.g2
            )));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(BoundsError::Domain(format!(
                "beta must be in [0, 1), got {}",
                self.beta
            )));
        }
        if !(self.df >= 0.0) || !(self.dw >= 0.0) {
            return Err(BoundsError::Domain("D_f and D_w must be >= 0".into()));
        }
        Ok(())
    }
}

/// Rows of the guarantee table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Row {
    StronglyConvexSmooth,
    StronglyConvex,
    Convex,
    Smooth,
    Momentum,
    Nesterov,
}

impl Row {
    pub const ALL: [Row; 6] = [
        Row::StronglyConvexSmooth,
        Row::StronglyConvex,
        Row::Convex,
        Row::Smooth,
        Row::Momentum,
        Row::Nesterov,
    ];

    /// Exponent `p` in `alpha * (G²/K)^p`.
    pub fn exponent(self) -> f64 {
        match self {
            Row::StronglyConvexSmooth | Row::StronglyConvex => 1.0,
            _ => 0.5,
        }
    }
}

impl fmt::Display for Row {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Row::StronglyConvexSmooth => "SC+Smooth",
            Row::StronglyConvex => "SC",
            Row::Convex => "Convex",
            Row::Smooth => "Smooth",
            Row::Momentum => "Momentum",
            Row::Nesterov => "Nesterov",
        };
        f.write_str(name)
    }
}

fn require_strong_convexity(row: Row, obj: &ObjectiveClass) -> Result<f64, BoundsError> {
    if obj.lambda > 0.0 && obj.convex {
        Ok(obj.lambda)
    } else {
        Err(BoundsError::AssumptionViolation {
            row,
            requirement: "lambda > 0 (strong convexity)",
        })
    }
}

fn require_smoothness(row: Row, obj: &ObjectiveClass) -> Result<f64, BoundsError> {
    obj.smooth_l.ok_or(BoundsError::AssumptionViolation {
        row,
        requirement: "a finite smoothness constant L",
    })
}

/// `beta^2 + (1-beta)^2` for momentum, `beta^4 + (1-beta)^2` for Nesterov.
fn momentum_factor(row: Row, beta: f64) -> f64 {
    let lead = if row == Row::Nesterov {
        beta.powi(4)
    } else {
        beta * beta
    };
    lead + (1.0 - beta).powi(2)
}

/// Evaluates the guarantee of `row` for `query`.
pub fn theta(query: &BoundQuery, row: Row) -> Result<f64, BoundsError> {
    query.validate()?;
    let obj = &query.objective;
    let k = query.iterations as f64;
    let g2 = query.g2;
    match row {
        Row::StronglyConvexSmooth => {
            let lambda = require_strong_convexity(row, obj)?;
            let l = require_smoothness(row, obj)?;
            Ok(2.0 * l / (lambda * lambda) * g2 / k)
        }
        Row::StronglyConvex => {
            let lambda = require_strong_convexity(row, obj)?;
            Ok(4.0 / (lambda * lambda) * g2 / k)
        }
        Row::Convex => {
            if !obj.convex {
                return Err(BoundsError::AssumptionViolation {
                    row,
                    requirement: "a convex objective",
                });
            }
            Ok(query.dw * (g2 / k).sqrt())
        }
        Row::Smooth => {
            let l = require_smoothness(row, obj)?;
            Ok((l * query.df).sqrt() * (g2 / k).sqrt())
        }
        Row::Momentum | Row::Nesterov => {
            let l = require_smoothness(row, obj)?;
            let beta = query.beta;
            let alpha =
                (8.0 * query.df * l * momentum_factor(row, beta) / (1.0 - beta).powi(2)).sqrt();
            Ok(alpha * (g2 / k).sqrt())
        }
    }
}

/// Step-size schedule that attains a row's guarantee.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StepSize {
    /// `eta_k = 1 / (lambda * k)`, `k` counted from 1.
    Decaying {
        lambda: f64,
    },
    Constant(f64),
}

impl StepSize {
    pub fn at(&self, k: u64) -> f64 {
        match *self {
            StepSize::Decaying { lambda } => 1.0 / (lambda * k.max(1) as f64),
            StepSize::Constant(eta) => eta,
        }
    }
}

impl fmt::Display for StepSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepSize::Decaying { lambda } => write!(f, "1/({lambda}·k)"),
            StepSize::Constant(eta) => write!(f, "{eta}"),
        }
    }
}

pub fn optimal_step_size(query: &BoundQuery, row: Row) -> Result<StepSize, BoundsError> {
    query.validate()?;
    let obj = &query.objective;
    let k = query.iterations as f64;
    let g2 = query.g2;
    let positive_g = || {
        if g2 > 0.0 {
            Ok(())
        } else {
            Err(BoundsError::Domain(format!(
                "row {row} step size needs G² > 0"
            )))
        }
    };
    match row {
        Row::StronglyConvexSmooth | Row::StronglyConvex => {
            let lambda = require_strong_convexity(row, obj)?;
            if row == Row::StronglyConvexSmooth {
                require_smoothness(row, obj)?;
            }
            Ok(StepSize::Decaying { lambda })
        }
        Row::Convex => {
            if !obj.convex {
                return Err(BoundsError::AssumptionViolation {
                    row,
                    requirement: "a convex objective",
                });
            }
            positive_g()?;
            Ok(StepSize::Constant(query.dw / (g2.sqrt() * k.sqrt())))
        }
        Row::Smooth => {
            let l = require_smoothness(row, obj)?;
            positive_g()?;
            Ok(StepSize::Constant((2.0 * query.df / (l * k * g2)).sqrt()))
        }
        Row::Momentum | Row::Nesterov => {
            let l = require_smoothness(row, obj)?;
            positive_g()?;
            let beta = query.beta;
            let num = 2.0 * query.df * (1.0 - beta).powi(4);
            let den = momentum_factor(row, beta) * k * l * g2;
            Ok(StepSize::Constant((num / den).sqrt()))
        }
    }
}

/// Number of iterations an estimator of cost `cost` affords in `t_opt` seconds.
pub fn iterations_for_budget(t_opt: f64, cost: f64) -> Result<u64, BoundsError> {
    if !(cost > 0.0) || !(t_opt >= 0.0) {
        return Err(BoundsError::Domain(format!(
            "need cost > 0 and budget >= 0, got {cost}, {t_opt}"
        )));
    }
    Ok(((t_opt / cost).floor() as u64).max(1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorProfile {
    pub label: String,
    pub g2: f64,
    /// Seconds per evaluation.
    pub t: f64,
}

impl EstimatorProfile {
    pub fn new(label: impl Into<String>, g2: f64, t: f64) -> Self {
        Self {
            label: label.into(),
            g2,
            t,
        }
    }

    pub fn score(&self) -> f64 {
        self.g2 * self.t
    }
}

/// Indices of `pool` sorted ascending by `g2 * t`; the argmin comes first and
/// ties keep pool order.
pub fn rank_by_g2t(pool: &[EstimatorProfile]) -> Result<Vec<usize>, BoundsError> {
    if pool.is_empty() {
        return Err(BoundsError::Domain("empty estimator pool".into()));
    }
    for p in pool {
        if !(p.t > 0.0) || !(p.g2 >= 0.0) {
            return Err(BoundsError::Domain(format!(
                "estimator {} needs t > 0 and g2 >= 0",
                p.label
            )));
        }
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| pool[a].score().total_cmp(&pool[b].score()));
    Ok(order)
}
