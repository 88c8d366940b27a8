//! Budgeted SGVI runs with scheduled estimator selection.
//!
//! A run warm-starts the variational parameters with the base estimator,
//! then performs momentum SGD (`v ← βv + g`, `w ← w + ηv`, ascent on the
//! ELBO) until the time or step budget is spent. At each scheduled time the
//! configured selector picks the estimator for the next period; its overhead
//! counts against the budget. ELBO records are taken with the run clock
//! paused.

mod config;
mod summary;

use std::fs;
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

pub use config::{
    log_uniform_grid, DataSource, ExperimentConfig, LearningRate, ModeName, OptimizerConfig,
    SelectionConfig,
};
pub use summary::{ExperimentSummary, RunSummary, SelectionEvent};

use crate::clock::{Clock, RunClock, WallClock};
use crate::data::{
    load_libsvm, load_table, synth_dataset, DataError, Dataset, SynthKind, TableSpec, TraceRecord,
};
use crate::estimators::{
    minibatch_estimate, BaseEstimator, ControlVariate, ControlVariateSet, EntropyCv,
    EstimatorError, EstimatorSpec, PriorCv, TaylorCv,
};
use crate::rng::{derive_seed, Execution};
use crate::selection::{
    collect_quadratic_stats, minimum_variance_weights, profile_cost, reselection_schedule,
    select_from_pool, solve_support_enumeration, time_of_support, CostProfile, PoolMember,
    SelectionDecision, SelectionError, SquaredNormStats, Support,
};
use crate::vi::{
    elbo_estimate, make_model, ModelKind, ModelOptions, ModelSpec, VariationalParams, ViError,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ViError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl ExperimentError {
    /// Whether the error was detected before any computation started.
    pub fn is_config(&self) -> bool {
        matches!(self, ExperimentError::Config(_))
    }
}

fn config_err(msg: impl Into<String>) -> ExperimentError {
    ExperimentError::Config(msg.into())
}

type SampleFn<'a> = Box<dyn Fn(&[f64]) -> Vec<f64> + Sync + Send + 'a>;

/// Estimator, trace label, predicted `Ĝ²` and predicted cost of a selection.
type Selected = (EstimatorSpec, String, Option<f64>, f64);

const STREAM_WARM: u64 = 1;
const STREAM_STEP: u64 = 2;
const STREAM_SELECT: u64 = 3;
const STREAM_EVAL: u64 = 4;

/// The validated selection strategy.
#[derive(Debug, Clone)]
enum Mode {
    BaseOnly,
    CvAuto,
    CvFixed(Support),
    Pool(Vec<EstimatorSpec>),
}

fn parse_cv(name: &str) -> Result<Arc<dyn ControlVariate>, ExperimentError> {
    match name {
        "c1" => Ok(Arc::new(EntropyCv)),
        "c2" => Ok(Arc::new(TaylorCv)),
        "c3" => Ok(Arc::new(PriorCv)),
        other => Err(config_err(format!(
            "unknown control variate '{other}' (expected c1, c2 or c3)"
        ))),
    }
}

fn parse_member(name: &str) -> Result<EstimatorSpec, ExperimentError> {
    match name.to_ascii_lowercase().as_str() {
        "rep" => Ok(EstimatorSpec::rep()),
        "miller" => Ok(EstimatorSpec::miller()),
        "stl" => Ok(EstimatorSpec::stl()),
        _ => Err(config_err(format!(
            "unknown pool member '{name}' (expected Rep, Miller or STL)"
        ))),
    }
}

fn load_dataset(config: &ExperimentConfig) -> Result<Dataset, ExperimentError> {
    Ok(match &config.data {
        DataSource::Synth {
            size,
            features,
            ethnicities,
            seed,
        } => {
            if *size == 0 {
                return Err(config_err("data.size must be >= 1"));
            }
            let kind = match config.model {
                ModelKind::LogReg => SynthKind::Classification {
                    features: features.unwrap_or(10),
                },
                ModelKind::HierPoisson => SynthKind::Counts {
                    ethnicities: ethnicities.unwrap_or(3),
                },
                ModelKind::BnnA | ModelKind::BnnB => SynthKind::Regression {
                    features: features.unwrap_or(11),
                },
            };
            synth_dataset(kind, *size, *seed)
        }
        DataSource::Libsvm { path } => Dataset::Classification(load_libsvm(path)?),
        DataSource::Table { path, target } => {
            let spec = match (config.model, target) {
                (ModelKind::HierPoisson, _) => TableSpec::counts_default(),
                (_, Some(t)) => TableSpec::Regression { target: t.clone() },
                (_, None) => {
                    return Err(config_err("data.target is required for regression tables"))
                }
            };
            load_table(path, &spec)?.into()
        }
    })
}

fn validate(config: &ExperimentConfig) -> Result<(), ExperimentError> {
    let opt = &config.optimizer;
    if !(opt.time_budget > 0.0 && opt.time_budget.is_finite()) {
        return Err(config_err("optimizer.time_budget must be positive"));
    }
    if opt.step_budget == Some(0) {
        return Err(config_err("optimizer.step_budget must be >= 1"));
    }
    let rates = opt.learning_rate.values();
    if rates.is_empty() || rates.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
        return Err(config_err("learning rates must be positive"));
    }
    if !(0.0..1.0).contains(&opt.momentum) {
        return Err(config_err("optimizer.momentum must be in [0, 1)"));
    }
    if opt.minibatch == 0 || opt.record_every == 0 || opt.elbo_samples == 0 {
        return Err(config_err(
            "minibatch, record_every and elbo_samples must be >= 1",
        ));
    }
    if !(opt.warm_start_rate >= 0.0) {
        return Err(config_err("optimizer.warm_start_rate must be nonnegative"));
    }
    if config.seeds.is_empty() {
        return Err(config_err("seeds must be non-empty"));
    }
    let sel = &config.selection;
    reselection_schedule(1.0, &sel.fractions)
        .map_err(|e| config_err(format!("selection.fractions: {e}")))?;
    if config.sample_count() == 0 {
        return Err(config_err("selection.m must be >= 1"));
    }
    if sel.profile_warmup < 1 || sel.profile_reps < 3 {
        return Err(config_err(
            "profiling needs profile_warmup >= 1 and profile_reps >= 3",
        ));
    }
    if config.hidden_units == 0 {
        return Err(config_err("hidden_units must be >= 1"));
    }
    Ok(())
}

/// Everything a single run needs, built once from a configuration.
pub struct Experiment {
    config: ExperimentConfig,
    model: Box<dyn ModelSpec>,
    cvs: ControlVariateSet,
    mode: Mode,
}

/// Outcome of one (learning rate, seed) run.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub learning_rate: f64,
    pub trace: Vec<TraceRecord>,
    pub profile: CostProfile,
    pub steps: u64,
    pub wall_seconds: f64,
    pub final_params: VariationalParams,
}

/// Measured costs of the configured estimators at the warm-started parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ProfileReport {
    pub labels: Vec<String>,
    pub t0: f64,
    pub t: Vec<f64>,
    pub warmup: usize,
    pub reps: usize,
}

/// One selection at the warm-started parameters, for inspection.
#[derive(Debug, Clone)]
pub struct SelectOutcome {
    pub stats: SquaredNormStats,
    pub profile: CostProfile,
    pub decision: SelectionDecision,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self, ExperimentError> {
        validate(&config)?;
        let cvs = ControlVariateSet::new(
            config
                .selection
                .control_variates
                .iter()
                .map(|n| parse_cv(n))
                .collect::<Result<_, _>>()?,
        );
        let data = load_dataset(&config)?;
        let model = make_model(
            config.model,
            &data,
            &ModelOptions {
                hidden_units: config.hidden_units,
            },
        )
        .map_err(|e| match e {
            ViError::Ingestion(msg) => config_err(msg),
            other => other.into(),
        })?;
        Self::assemble(config, model, cvs)
    }

    /// An experiment on an explicit model; `config.model` and `config.data`
    /// are ignored.
    pub fn from_parts(
        config: ExperimentConfig,
        model: Box<dyn ModelSpec>,
    ) -> Result<Self, ExperimentError> {
        validate(&config)?;
        let cvs = ControlVariateSet::new(
            config
                .selection
                .control_variates
                .iter()
                .map(|n| parse_cv(n))
                .collect::<Result<_, _>>()?,
        );
        Self::assemble(config, model, cvs)
    }

    fn assemble(
        config: ExperimentConfig,
        model: Box<dyn ModelSpec>,
        cvs: ControlVariateSet,
    ) -> Result<Self, ExperimentError> {
        let mut exp = Self {
            mode: Mode::BaseOnly,
            config,
            model,
            cvs,
        };
        exp.mode = exp.build_mode()?;
        exp.check_compatibility()?;
        Ok(exp)
    }

    /// Replaces the control variates (for custom or instrumented ones).
    pub fn with_control_variates(
        mut self,
        cvs: ControlVariateSet,
    ) -> Result<Self, ExperimentError> {
        self.cvs = cvs;
        self.mode = self.build_mode()?;
        self.check_compatibility()?;
        Ok(self)
    }

    fn build_mode(&self) -> Result<Mode, ExperimentError> {
        let sel = &self.config.selection;
        let j = self.cvs.len();
        Ok(match sel.mode {
            ModeName::BaseOnly => Mode::BaseOnly,
            ModeName::CvAuto => {
                if j == 0 {
                    return Err(config_err("cv_auto needs at least one control variate"));
                }
                Mode::CvAuto
            }
            ModeName::CvFixed => {
                let s = sel
                    .support
                    .as_deref()
                    .ok_or_else(|| config_err("cv_fixed needs selection.support"))?;
                let support = Support::parse(s).filter(|sup| sup.j == j).ok_or_else(|| {
                    config_err(format!(
                        "support '{s}' must be a string of {j} 0/1 characters"
                    ))
                })?;
                Mode::CvFixed(support)
            }
            ModeName::Pool => {
                let names = sel
                    .members
                    .clone()
                    .unwrap_or_else(|| vec!["Rep".into(), "Miller".into(), "STL".into()]);
                if names.is_empty() {
                    return Err(config_err("pool mode needs at least one member"));
                }
                Mode::Pool(
                    names
                        .iter()
                        .map(|n| parse_member(n))
                        .collect::<Result<_, _>>()?,
                )
            }
        })
    }

    fn check_compatibility(&self) -> Result<(), ExperimentError> {
        let model = self.model.as_ref();
        let wrap = |e: EstimatorError| config_err(e.to_string());
        match &self.mode {
            Mode::BaseOnly => Ok(()),
            Mode::CvAuto => self.cvs.check_model(model).map_err(wrap),
            Mode::CvFixed(s) => s
                .indices()
                .iter()
                .try_for_each(|&i| self.cvs.members()[i].check_model(model))
                .map_err(wrap),
            Mode::Pool(members) => members
                .iter()
                .try_for_each(|m| m.check_model(model))
                .map_err(wrap),
        }?;
        if let Some(c) = &self.config.selection.costs {
            let expected = match &self.mode {
                Mode::Pool(m) => m.len().saturating_sub(1),
                _ => self.cvs.len(),
            };
            if c.t.len() != expected || !(c.t0 > 0.0) {
                return Err(config_err(format!(
                    "selection.costs needs t0 > 0 and {expected} marginal costs"
                )));
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn model(&self) -> &dyn ModelSpec {
        self.model.as_ref()
    }

    pub fn control_variates(&self) -> &ControlVariateSet {
        &self.cvs
    }

    fn j(&self) -> usize {
        self.cvs.len()
    }

    fn base_spec(&self) -> EstimatorSpec {
        match self.config.selection.base {
            BaseEstimator::Rep => EstimatorSpec::rep(),
            BaseEstimator::Stl => EstimatorSpec::stl(),
        }
    }

    fn weighted_spec(&self, weights: &[f64]) -> Result<EstimatorSpec, ExperimentError> {
        Ok(EstimatorSpec::weighted(
            self.config.selection.base,
            &self.cvs,
            weights,
        )?)
    }

    pub fn initial_params(&self) -> VariationalParams {
        VariationalParams::isotropic(
            vec![0.0; self.model.dim()],
            self.config.init_log_std,
            self.config.family,
        )
    }

    /// Minibatch gradient of `spec` at `params` on noise stream `seed`.
    pub fn gradient(
        &self,
        spec: &EstimatorSpec,
        params: &VariationalParams,
        seed: u64,
    ) -> Result<Vec<f64>, ExperimentError> {
        let prepared = spec.prepare(params, self.model.as_ref())?;
        Ok(minibatch_estimate(
            |xi| prepared.eval(xi),
            params.dim(),
            self.config.optimizer.minibatch,
            seed,
        )?)
    }

    /// Plain SGD with the base estimator at the warm-start rate.
    pub fn warm_start(&self, seed: u64) -> Result<VariationalParams, ExperimentError> {
        let mut params = self.initial_params();
        let spec = self.base_spec();
        let stream = derive_seed(seed, STREAM_WARM);
        for k in 0..self.config.optimizer.warm_start_steps {
            let g = self.gradient(&spec, &params, derive_seed(stream, k))?;
            params.add_scaled(self.config.optimizer.warm_start_rate, &g)?;
        }
        Ok(params)
    }

    fn profile_spec(
        &self,
        clock: &dyn Clock,
        spec: &EstimatorSpec,
        params: &VariationalParams,
    ) -> Result<f64, ExperimentError> {
        let sel = &self.config.selection;
        let mut k = 0u64;
        let t = profile_cost(
            clock,
            || {
                k += 1;
                self.gradient(spec, params, derive_seed(u64::MAX, k))
                    .map(|_| ())
            },
            sel.profile_warmup,
            sel.profile_reps,
        )?;
        Ok(t.max(1e-9))
    }

    /// Per-step costs: base plus marginal control-variate costs, or in pool
    /// mode the first member as `t0` and the others as offsets from it.
    fn measure_costs(
        &self,
        mode: &Mode,
        clock: &dyn Clock,
        params: &VariationalParams,
    ) -> Result<CostProfile, ExperimentError> {
        if let Some(c) = &self.config.selection.costs {
            return Ok(c.clone());
        }
        if let Mode::Pool(members) = mode {
            let costs = members
                .iter()
                .map(|m| self.profile_spec(clock, m, params))
                .collect::<Result<Vec<_>, _>>()?;
            return Ok(CostProfile {
                t0: costs[0],
                t: costs[1..].iter().map(|c| c - costs[0]).collect(),
            });
        }
        let t0 = self.profile_spec(clock, &self.base_spec(), params)?;
        let mut t = Vec::with_capacity(self.j());
        if !matches!(mode, Mode::BaseOnly) {
            for i in 0..self.j() {
                let mut w = vec![0.0; self.j()];
                w[i] = 1.0;
                let spec = self.weighted_spec(&w)?;
                t.push((self.profile_spec(clock, &spec, params)? - t0).max(0.0));
            }
        }
        Ok(CostProfile::new(t0, t)?)
    }

    pub fn profile(&self) -> Result<ProfileReport, ExperimentError> {
        let params = self.warm_start(self.config.seeds[0])?;
        let profile = self.measure_costs(&self.mode, &WallClock::new(), &params)?;
        let labels = match &self.mode {
            Mode::Pool(m) => m.iter().map(|s| s.label.clone()).collect(),
            Mode::BaseOnly => vec!["base".into()],
            _ => std::iter::once("base".to_string())
                .chain(self.cvs.labels())
                .collect(),
        };
        Ok(ProfileReport {
            labels,
            t0: profile.t0,
            t: profile.t,
            warmup: self.config.selection.profile_warmup,
            reps: self.config.selection.profile_reps,
        })
    }

    /// `Ĝ²` statistics of the base estimator and every control variate.
    pub fn quadratic_stats(
        &self,
        params: &VariationalParams,
        seed: u64,
    ) -> Result<SquaredNormStats, ExperimentError> {
        let model = self.model.as_ref();
        let base_spec = self.base_spec();
        let base = base_spec.prepare(params, model)?;
        let prepared = self
            .cvs
            .members()
            .iter()
            .map(|c| c.prepare(params, model))
            .collect::<Result<Vec<_>, _>>()?;
        let evals: Vec<SampleFn<'_>> = prepared
            .iter()
            .map(|p| Box::new(move |xi: &[f64]| p.eval(xi)) as Box<_>)
            .collect();
        Ok(collect_quadratic_stats(
            |xi: &[f64]| base.eval(xi),
            &evals,
            params.dim(),
            self.config.sample_count(),
            seed,
            Execution::default(),
        )?)
    }

    /// Cost-aware weight selection at the warm-started parameters of the first seed.
    pub fn select_once(&self) -> Result<SelectOutcome, ExperimentError> {
        if self.cvs.is_empty() {
            return Err(config_err("selection needs at least one control variate"));
        }
        self.cvs
            .check_model(self.model.as_ref())
            .map_err(|e| config_err(e.to_string()))?;
        let seed = self.config.seeds[0];
        let params = self.warm_start(seed)?;
        let profile = self.measure_costs(&Mode::CvAuto, &WallClock::new(), &params)?;
        let stats =
            self.quadratic_stats(&params, derive_seed(derive_seed(seed, STREAM_SELECT), 0))?;
        let decision = solve_support_enumeration(&stats, &profile)?;
        Ok(SelectOutcome {
            stats,
            profile,
            decision,
        })
    }

    fn initial_label(&self) -> String {
        match &self.mode {
            Mode::Pool(members) => format!("pool:{}", members[0].label),
            Mode::CvFixed(s) if self.config.selection.fractions.is_empty() => format!("cv:{s}"),
            _ => format!("cv:{}", Support::empty(self.j())),
        }
    }

    /// Runs the selector; returns the estimator for the next period, its
    /// trace label and the predicted `(Ĝ², T̂)`.
    fn select(
        &self,
        params: &VariationalParams,
        profile: &CostProfile,
        seed: u64,
    ) -> Result<Option<Selected>, ExperimentError> {
        match &self.mode {
            Mode::BaseOnly => Ok(Some((
                self.base_spec(),
                self.initial_label(),
                None,
                profile.t0,
            ))),
            Mode::CvAuto => {
                let stats = self.quadratic_stats(params, seed)?;
                if !stats.is_finite() {
                    return Ok(None);
                }
                let d = solve_support_enumeration(&stats, profile)?;
                Ok(Some((
                    self.weighted_spec(&d.weights)?,
                    format!("cv:{}", d.support),
                    Some(d.g2hat),
                    d.that,
                )))
            }
            Mode::CvFixed(support) => {
                let that = time_of_support(profile, *support).unwrap_or(profile.t0);
                if support.is_empty() {
                    return Ok(Some((
                        self.base_spec(),
                        format!("cv:{support}"),
                        None,
                        that,
                    )));
                }
                let stats = self.quadratic_stats(params, seed)?;
                if !stats.is_finite() {
                    return Ok(None);
                }
                let weights = minimum_variance_weights(&stats, *support)?;
                let g2 = crate::selection::g2_of_weights(&stats, &weights)?;
                let mut spec = self.weighted_spec(&weights)?;
                spec.label = format!("cv:{support}");
                Ok(Some((spec, format!("cv:{support}"), Some(g2), that)))
            }
            Mode::Pool(members) => {
                let model = self.model.as_ref();
                let prepared = members
                    .iter()
                    .map(|m| m.prepare(params, model))
                    .collect::<Result<Vec<_>, _>>()?;
                let evals: Vec<SampleFn<'_>> = prepared
                    .iter()
                    .map(|p| Box::new(move |xi: &[f64]| p.eval(xi)) as Box<_>)
                    .collect();
                let costs: Vec<f64> = std::iter::once(profile.t0)
                    .chain(profile.t.iter().map(|t| profile.t0 + t))
                    .collect();
                let pool: Vec<PoolMember> = members
                    .iter()
                    .zip(&evals)
                    .zip(&costs)
                    .map(|((m, e), c)| PoolMember {
                        label: m.label.clone(),
                        eval: e.as_ref(),
                        cost: c.max(1e-12),
                    })
                    .collect();
                let choice = select_from_pool(
                    &pool,
                    params.dim(),
                    self.config.sample_count(),
                    seed,
                    Execution::default(),
                )?;
                if choice.g2.iter().any(|g| !g.is_finite()) {
                    return Ok(None);
                }
                let i = choice.index;
                Ok(Some((
                    members[i].clone(),
                    format!("pool:{}", members[i].label),
                    Some(choice.g2[i]),
                    costs[i],
                )))
            }
        }
    }

    /// One optimization run on the wall clock.
    pub fn run_seed(&self, learning_rate: f64, seed: u64) -> Result<SeedRun, ExperimentError> {
        self.run_seed_with_clock(learning_rate, seed, WallClock::new())
    }

    pub fn run_seed_with_clock<C: Clock>(
        &self,
        learning_rate: f64,
        seed: u64,
        clock: C,
    ) -> Result<SeedRun, ExperimentError> {
        let opt = &self.config.optimizer;
        let mut params = self.warm_start(seed)?;
        let eval_seed = derive_seed(seed, STREAM_EVAL);
        let step_stream = derive_seed(seed, STREAM_STEP);
        let select_stream = derive_seed(seed, STREAM_SELECT);
        let model = self.model.as_ref();

        let triggers: Vec<f64> = match opt.step_budget {
            _ if matches!(self.mode, Mode::BaseOnly) => Vec::new(),
            Some(n) => self
                .config
                .selection
                .fractions
                .iter()
                .map(|f| (f * n as f64).floor())
                .collect(),
            None => reselection_schedule(opt.time_budget, &self.config.selection.fractions)?,
        };
        let mut next_trigger = 0;

        let mut run = RunClock::start(clock);
        let mut trace = Vec::new();
        let mut label = self.initial_label();
        let record = |trace: &mut Vec<TraceRecord>,
                      run: &mut RunClock<C>,
                      params: &VariationalParams,
                      step: u64,
                      label: &str,
                      g2hat: Option<f64>,
                      that: Option<f64>|
         -> Result<f64, ExperimentError> {
            let elbo = run.paused(|| elbo_estimate(params, model, opt.elbo_samples, eval_seed))?;
            let elbo = if elbo.is_nan() {
                f64::NEG_INFINITY
            } else {
                elbo
            };
            trace.push(TraceRecord {
                wall_seconds: run.elapsed(),
                step,
                elbo,
                selection: label.to_string(),
                g2hat,
                that,
                seed,
            });
            Ok(elbo)
        };

        record(&mut trace, &mut run, &params, 0, &label, None, None)?;
        let profile = self.measure_costs(&self.mode, run.inner(), &params)?;
        let mut spec = match &self.mode {
            Mode::Pool(m) => m[0].clone(),
            Mode::CvFixed(s) if triggers.is_empty() => {
                let mut w = vec![0.0; self.j()];
                s.indices().iter().for_each(|&i| w[i] = 1.0);
                self.weighted_spec(&w)?
            }
            _ => self.base_spec(),
        };
        let mut velocity = vec![0.0; params.n_params()];
        let mut step = 0u64;
        let mut selections = 0u64;
        let mut diverged = false;

        loop {
            let progress = match opt.step_budget {
                Some(n) => {
                    if step >= n {
                        break;
                    }
                    step as f64
                }
                None => {
                    let t = run.elapsed();
                    if t >= opt.time_budget {
                        break;
                    }
                    t
                }
            };
            if next_trigger < triggers.len() && progress >= triggers[next_trigger] {
                while next_trigger < triggers.len() && progress >= triggers[next_trigger] {
                    next_trigger += 1;
                }
                // non-finite statistics mean the iterate has already blown up
                let Some((s, l, g2, that)) =
                    self.select(&params, &profile, derive_seed(select_stream, selections))?
                else {
                    diverged = true;
                    break;
                };
                selections += 1;
                spec = s;
                label = l;
                record(&mut trace, &mut run, &params, step, &label, g2, Some(that))?;
                continue;
            }
            let g = self.gradient(&spec, &params, derive_seed(step_stream, step))?;
            if g.iter().any(|v| !v.is_finite()) {
                diverged = true;
                break;
            }
            for (v, gi) in velocity.iter_mut().zip(&g) {
                *v = opt.momentum * *v + gi;
            }
            params.add_scaled(learning_rate, &velocity)?;
            step += 1;
            if step.is_multiple_of(opt.record_every) {
                let elbo = record(&mut trace, &mut run, &params, step, &label, None, None)?;
                if !elbo.is_finite() {
                    diverged = true;
                    break;
                }
            }
        }
        if !diverged && trace.last().is_none_or(|r| r.step != step) {
            record(&mut trace, &mut run, &params, step, &label, None, None)?;
        }
        if diverged {
            trace.push(TraceRecord {
                wall_seconds: run.elapsed(),
                step,
                elbo: f64::NEG_INFINITY,
                selection: label,
                g2hat: None,
                that: None,
                seed,
            });
        }
        let wall_seconds = run.elapsed();
        Ok(SeedRun {
            seed,
            learning_rate,
            trace,
            profile,
            steps: step,
            wall_seconds,
            final_params: params,
        })
    }

    /// All (learning rate, seed) runs, sequentially.
    pub fn run(&self) -> Result<(ExperimentSummary, Vec<Vec<SeedRun>>), ExperimentError> {
        let mut all = Vec::new();
        let mut runs = Vec::new();
        for lr in self.config.optimizer.learning_rate.values() {
            let per_seed = self
                .config
                .seeds
                .iter()
                .map(|&s| self.run_seed(lr, s))
                .collect::<Result<Vec<_>, _>>()?;
            let traces: Vec<Vec<TraceRecord>> = per_seed.iter().map(|r| r.trace.clone()).collect();
            runs.push(RunSummary::from_traces(lr, &traces));
            all.push(per_seed);
        }
        Ok((ExperimentSummary { runs }, all))
    }
}

/// Trace file name for learning-rate index `lr_index` and `seed`.
pub fn trace_file_name(lr_index: usize, seed: u64) -> String {
    format!("trace_lr{lr_index}_seed{seed}.csv")
}

pub const SUMMARY_FILE: &str = "summary.json";

/// Runs the experiment and writes one trace per (learning rate, seed) and
/// the summary into `out` (or the configured output directory).
pub fn run_experiment(
    config: ExperimentConfig,
    out: Option<&Path>,
) -> Result<ExperimentSummary, ExperimentError> {
    let out = out.map(Path::to_path_buf).or_else(|| config.output.clone());
    let exp = Experiment::new(config)?;
    if let Some(dir) = &out {
        fs::create_dir_all(dir).map_err(|source| ExperimentError::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }
    let (summary, runs) = exp.run()?;
    if let Some(dir) = &out {
        for (i, per_seed) in runs.iter().enumerate() {
            for r in per_seed {
                crate::data::write_trace(dir.join(trace_file_name(i, r.seed)), &r.trace)?;
            }
        }
        summary.write_json(&dir.join(SUMMARY_FILE))?;
    }
    Ok(summary)
}

/// Profiles the configured estimators once.
pub fn run_profile(config: ExperimentConfig) -> Result<ProfileReport, ExperimentError> {
    Experiment::new(config)?.profile()
}
