//! ELBO-gradient estimators and control variates.
//!
//! Every estimator returns an estimate of `∇_w ELBO` in the flat parameter
//! layout of [`VariationalParams`] (mean block, then scale block). Control
//! variates have zero mean over `ξ ~ N(0, I)` at every fixed `w`, so adding
//! any weighted combination keeps the estimate unbiased:
//! `g_a(w, ξ) = g_base(w, ξ) + Σ_i a_i c_i(w, ξ)`.
//!
//! Control variates are evaluated in two phases. [`ControlVariate::prepare`]
//! does the per-iteration work (exact expectations, Hessian products at the
//! expansion point) and the returned [`PreparedCv`] evaluates one draw.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::normal_draw;
use crate::vi::{
    gaussian_prior_log_density, gaussian_prior_term_grad, quadratic_expectation, ModelSpec,
    QuadraticExpansion, QuadraticExpectation, VariationalParams, ViError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error(transparent)]
    Vi(#[from] ViError),
    #[error("control variate {cv} is unavailable for model {model}: {reason}")]
    Unavailable {
        cv: String,
        model: String,
        reason: String,
    },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
}

fn check_dims(
    params: &VariationalParams,
    model: &dyn ModelSpec,
    xi: &[f64],
) -> Result<(), EstimatorError> {
    if model.dim() != params.dim() {
        return Err(ViError::DimensionMismatch {
            expected: params.dim(),
            got: model.dim(),
        }
        .into());
    }
    if xi.len() != params.dim() {
        return Err(ViError::DimensionMismatch {
            expected: params.dim(),
            got: xi.len(),
        }
        .into());
    }
    Ok(())
}

fn sub_assign(a: &mut [f64], b: &[f64]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x -= y);
}

fn add_scaled(a: &mut [f64], s: f64, b: &[f64]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += s * y);
}

/// Reparameterized `∇_w log p(x, T_w(ξ))` without the entropy term.
fn reparam_log_p(params: &VariationalParams, model: &dyn ModelSpec, xi: &[f64]) -> Vec<f64> {
    let z = params.transform_unchecked(xi);
    params.pullback(xi, &model.grad(&z))
}

/// Reparameterization estimator with the closed-form entropy gradient.
pub fn base_rep(
    params: &VariationalParams,
    model: &dyn ModelSpec,
    xi: &[f64],
) -> Result<Vec<f64>, EstimatorError> {
    check_dims(params, model, xi)?;
    let mut g = reparam_log_p(params, model, xi);
    add_scaled(&mut g, 1.0, &params.entropy_grad());
    Ok(g)
}

/// Sticking-the-landing: the path-only gradient of `log p − log q`.
pub fn stl(
    params: &VariationalParams,
    model: &dyn ModelSpec,
    xi: &[f64],
) -> Result<Vec<f64>, EstimatorError> {
    check_dims(params, model, xi)?;
    let mut g = reparam_log_p(params, model, xi);
    sub_assign(&mut g, &params.path_grad_log_q_unchecked(xi));
    Ok(g)
}

/// Entropy control variate: path-only `∇_w log q_w(T_w(ξ))` minus its exact
/// expectation `−∇_w H(q_w)`.
pub fn cv_c1(params: &VariationalParams, xi: &[f64]) -> Result<Vec<f64>, EstimatorError> {
    let mut c = params.path_grad_log_q(xi)?;
    add_scaled(&mut c, 1.0, &params.entropy_grad());
    Ok(c)
}

/// Taylor control variate around `z0`: `∇_w E_q u(Z) − ∇_w u(T_w(ξ))` for the
/// second-order expansion `u` of `log p` at `z0`.
pub fn cv_c2(
    params: &VariationalParams,
    model: &dyn ModelSpec,
    xi: &[f64],
    z0: &[f64],
) -> Result<Vec<f64>, EstimatorError> {
    check_dims(params, model, xi)?;
    if z0.len() != params.dim() {
        return Err(ViError::DimensionMismatch {
            expected: params.dim(),
            got: z0.len(),
        }
        .into());
    }
    Ok(TaylorPrepared::new(params, model, z0.to_vec())?.eval(xi))
}

/// Prior control variate: reparameterized gradient of the Gaussian prior
/// block minus its exact value.
pub fn cv_c3(
    params: &VariationalParams,
    model: &dyn ModelSpec,
    xi: &[f64],
) -> Result<Vec<f64>, EstimatorError> {
    check_dims(params, model, xi)?;
    Ok(PriorPrepared::new(params, model)?.eval(xi))
}

/// `g_base + Σ a_i c_i`.
pub fn combine(g_base: &[f64], cvs: &[Vec<f64>], a: &[f64]) -> Result<Vec<f64>, EstimatorError> {
    if cvs.len() != a.len() {
        return Err(EstimatorError::LengthMismatch {
            expected: cvs.len(),
            got: a.len(),
        });
    }
    let mut out = g_base.to_vec();
    for (c, &w) in cvs.iter().zip(a) {
        if c.len() != out.len() {
            return Err(EstimatorError::LengthMismatch {
                expected: out.len(),
                got: c.len(),
            });
        }
        if w != 0.0 {
            add_scaled(&mut out, w, c);
        }
    }
    Ok(out)
}

/// Like [`combine`], but control variates with zero weight are never evaluated.
pub fn combine_lazy(
    g_base: &[f64],
    evaluators: &[&dyn Fn() -> Vec<f64>],
    a: &[f64],
) -> Result<Vec<f64>, EstimatorError> {
    if evaluators.len() != a.len() {
        return Err(EstimatorError::LengthMismatch {
            expected: evaluators.len(),
            got: a.len(),
        });
    }
    let mut out = g_base.to_vec();
    for (eval, &w) in evaluators.iter().zip(a) {
        if w == 0.0 {
            continue;
        }
        let c = eval();
        if c.len() != out.len() {
            return Err(EstimatorError::LengthMismatch {
                expected: out.len(),
                got: c.len(),
            });
        }
        add_scaled(&mut out, w, &c);
    }
    Ok(out)
}

/// A control variate specialized to one parameter value.
pub trait PreparedCv: Send + Sync {
    fn eval(&self, xi: &[f64]) -> Vec<f64>;
}

pub trait ControlVariate: Send + Sync + fmt::Debug {
    fn label(&self) -> &str;

    /// Whether `prepare` can succeed for this model; checked before any compute.
    fn check_model(&self, model: &dyn ModelSpec) -> Result<(), EstimatorError>;

    fn prepare<'a>(
        &'a self,
        params: &'a VariationalParams,
        model: &'a dyn ModelSpec,
    ) -> Result<Box<dyn PreparedCv + 'a>, EstimatorError>;
}

/// `c1`, see [`cv_c1`].
#[derive(Debug, Clone, Copy, Default)]
pub struct EntropyCv;

struct EntropyPrepared<'a> {
    params: &'a VariationalParams,
    exact: Vec<f64>,
}

impl PreparedCv for EntropyPrepared<'_> {
    fn eval(&self, xi: &[f64]) -> Vec<f64> {
        let mut c = self.params.path_grad_log_q_unchecked(xi);
        add_scaled(&mut c, 1.0, &self.exact);
        c
    }
}

impl ControlVariate for EntropyCv {
    fn label(&self) -> &str {
        "c1"
    }

    fn check_model(&self, _model: &dyn ModelSpec) -> Result<(), EstimatorError> {
        Ok(())
    }

    fn prepare<'a>(
        &'a self,
        params: &'a VariationalParams,
        _model: &'a dyn ModelSpec,
    ) -> Result<Box<dyn PreparedCv + 'a>, EstimatorError> {
        Ok(Box::new(EntropyPrepared {
            params,
            exact: params.entropy_grad(),
        }))
    }
}

/// `c2`, expanded at the current variational mean.
#[derive(Debug, Clone, Copy, Default)]
pub struct TaylorCv;

struct TaylorPrepared<'a> {
    params: &'a VariationalParams,
    quad: QuadraticExpectation,
}

impl<'a> TaylorPrepared<'a> {
    fn new(
        params: &'a VariationalParams,
        model: &'a dyn ModelSpec,
        z0: Vec<f64>,
    ) -> Result<Self, EstimatorError> {
        let (f0, g) = model.log_joint_and_grad(&z0);
        let z0_for_hvp = z0.clone();
        let hvp = move |v: &[f64]| model.hvp(&z0_for_hvp, v);
        let expansion = QuadraticExpansion {
            z0,
            f0,
            g,
            hvp: &hvp,
        };
        let quad = quadratic_expectation(params, &expansion)?;
        Ok(Self { params, quad })
    }
}

impl PreparedCv for TaylorPrepared<'_> {
    fn eval(&self, xi: &[f64]) -> Vec<f64> {
        let mut c = self.quad.grad.clone();
        sub_assign(&mut c, &self.params.pullback(xi, &self.quad.grad_z_at(xi)));
        c
    }
}

impl ControlVariate for TaylorCv {
    fn label(&self) -> &str {
        "c2"
    }

    fn check_model(&self, _model: &dyn ModelSpec) -> Result<(), EstimatorError> {
        Ok(())
    }

    fn prepare<'a>(
        &'a self,
        params: &'a VariationalParams,
        model: &'a dyn ModelSpec,
    ) -> Result<Box<dyn PreparedCv + 'a>, EstimatorError> {
        Ok(Box::new(TaylorPrepared::new(
            params,
            model,
            params.mean().to_vec(),
        )?))
    }
}

/// `c3`, available only for models with a fixed Gaussian prior block.
#[derive(Debug, Clone, Copy, Default)]
pub struct PriorCv;

struct PriorPrepared<'a> {
    params: &'a VariationalParams,
    block: &'a crate::vi::PriorBlock,
    exact: Vec<f64>,
}

impl<'a> PriorPrepared<'a> {
    fn new(
        params: &'a VariationalParams,
        model: &'a dyn ModelSpec,
    ) -> Result<Self, EstimatorError> {
        PriorCv.check_model(model)?;
        let block = model.gaussian_prior_block().expect("checked above");
        let (_, exact) = gaussian_prior_term_grad(params, block)?;
        Ok(Self {
            params,
            block,
            exact,
        })
    }
}

impl PreparedCv for PriorPrepared<'_> {
    fn eval(&self, xi: &[f64]) -> Vec<f64> {
        let z = self.params.transform_unchecked(xi);
        let (_, gz) = gaussian_prior_log_density(&z, self.block);
        let mut c = self.params.pullback(xi, &gz);
        sub_assign(&mut c, &self.exact);
        c
    }
}

impl ControlVariate for PriorCv {
    fn label(&self) -> &str {
        "c3"
    }

    fn check_model(&self, model: &dyn ModelSpec) -> Result<(), EstimatorError> {
        match model.gaussian_prior_block() {
            Some(b) if !b.indices.is_empty() => Ok(()),
            _ => Err(EstimatorError::Unavailable {
                cv: "c3".into(),
                model: model.name().to_string(),
                reason: "model has no fixed Gaussian prior block".into(),
            }),
        }
    }

    fn prepare<'a>(
        &'a self,
        params: &'a VariationalParams,
        model: &'a dyn ModelSpec,
    ) -> Result<Box<dyn PreparedCv + 'a>, EstimatorError> {
        Ok(Box::new(PriorPrepared::new(params, model)?))
    }
}

/// Ordered control variates `c_1..c_J`.
#[derive(Debug, Clone, Default)]
pub struct ControlVariateSet {
    members: Vec<Arc<dyn ControlVariate>>,
}

impl ControlVariateSet {
    pub fn new(members: Vec<Arc<dyn ControlVariate>>) -> Self {
        Self { members }
    }

    /// `[c1, c2, c3]`.
    pub fn standard() -> Self {
        Self::new(vec![
            Arc::new(EntropyCv),
            Arc::new(TaylorCv),
            Arc::new(PriorCv),
        ])
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[Arc<dyn ControlVariate>] {
        &self.members
    }

    pub fn labels(&self) -> Vec<String> {
        self.members.iter().map(|m| m.label().to_string()).collect()
    }

    pub fn check_model(&self, model: &dyn ModelSpec) -> Result<(), EstimatorError> {
        self.members.iter().try_for_each(|m| m.check_model(model))
    }
}

/// Which base gradient the weighted control variates are added to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseEstimator {
    #[default]
    Rep,
    Stl,
}

/// A base estimator plus weighted control variates; the pool members of
/// finite-pool selection are instances of this.
#[derive(Debug, Clone)]
pub struct EstimatorSpec {
    pub label: String,
    pub base: BaseEstimator,
    pub cvs: Vec<(Arc<dyn ControlVariate>, f64)>,
}

impl EstimatorSpec {
    pub fn rep() -> Self {
        Self {
            label: "Rep".into(),
            base: BaseEstimator::Rep,
            cvs: Vec::new(),
        }
    }

    pub fn stl() -> Self {
        Self {
            label: "STL".into(),
            base: BaseEstimator::Stl,
            cvs: Vec::new(),
        }
    }

    /// Reparameterization plus the Taylor control variate at fixed weight 1.
    pub fn miller() -> Self {
        Self {
            label: "Miller".into(),
            base: BaseEstimator::Rep,
            cvs: vec![(Arc::new(TaylorCv), 1.0)],
        }
    }

    /// The standard three-member pool: Rep, Miller, STL.
    pub fn standard_pool() -> Vec<Self> {
        vec![Self::rep(), Self::miller(), Self::stl()]
    }

    /// `g_base + C a` over a control-variate set.
    pub fn weighted(
        base: BaseEstimator,
        set: &ControlVariateSet,
        weights: &[f64],
    ) -> Result<Self, EstimatorError> {
        if weights.len() != set.len() {
            return Err(EstimatorError::LengthMismatch {
                expected: set.len(),
                got: weights.len(),
            });
        }
        let bits: String = weights
            .iter()
            .map(|&w| if w != 0.0 { '1' } else { '0' })
            .collect();
        let cvs = set
            .members()
            .iter()
            .cloned()
            .zip(weights.iter().copied())
            .filter(|(_, w)| *w != 0.0)
            .collect();
        Ok(Self {
            label: format!("cv:{bits}"),
            base,
            cvs,
        })
    }

    pub fn check_model(&self, model: &dyn ModelSpec) -> Result<(), EstimatorError> {
        self.cvs
            .iter()
            .try_for_each(|(cv, _)| cv.check_model(model))
    }

    pub fn prepare<'a>(
        &'a self,
        params: &'a VariationalParams,
        model: &'a dyn ModelSpec,
    ) -> Result<PreparedEstimator<'a>, EstimatorError> {
        if model.dim() != params.dim() {
            return Err(ViError::DimensionMismatch {
                expected: params.dim(),
                got: model.dim(),
            }
            .into());
        }
        let cvs = self
            .cvs
            .iter()
            .filter(|(_, w)| *w != 0.0)
            .map(|(cv, w)| Ok((*w, cv.prepare(params, model)?)))
            .collect::<Result<Vec<_>, EstimatorError>>()?;
        let entropy = match self.base {
            BaseEstimator::Rep => Some(params.entropy_grad()),
            BaseEstimator::Stl => None,
        };
        Ok(PreparedEstimator {
            params,
            model,
            entropy,
            cvs,
        })
    }
}

/// An estimator specialized to one parameter value.
pub struct PreparedEstimator<'a> {
    params: &'a VariationalParams,
    model: &'a dyn ModelSpec,
    /// `Some(∇H)` for the reparameterization base, `None` for STL.
    entropy: Option<Vec<f64>>,
    cvs: Vec<(f64, Box<dyn PreparedCv + 'a>)>,
}

impl PreparedEstimator<'_> {
    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    pub fn eval(&self, xi: &[f64]) -> Vec<f64> {
        let mut g = reparam_log_p(self.params, self.model, xi);
        match &self.entropy {
            Some(h) => add_scaled(&mut g, 1.0, h),
            None => sub_assign(&mut g, &self.params.path_grad_log_q_unchecked(xi)),
        }
        for (w, cv) in &self.cvs {
            add_scaled(&mut g, *w, &cv.eval(xi));
        }
        g
    }
}

/// Mean of `eval` over `batch_size` draws of the stream `seed`.
pub fn minibatch_estimate(
    eval: impl Fn(&[f64]) -> Vec<f64>,
    dim: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<f64>, EstimatorError> {
    if batch_size == 0 {
        return Err(ViError::Domain("batch_size must be >= 1".into()).into());
    }
    let mut acc = eval(&normal_draw(seed, 0, dim));
    for i in 1..batch_size as u64 {
        add_scaled(&mut acc, 1.0, &eval(&normal_draw(seed, i, dim)));
    }
    if batch_size > 1 {
        let inv = 1.0 / batch_size as f64;
        acc.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(acc)
}
