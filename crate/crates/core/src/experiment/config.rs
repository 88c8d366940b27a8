//! Experiment configuration (TOML).
//!
//! ```toml
//! model = "log_reg"            # log_reg | hier_poisson | bnn_a | bnn_b
//! family = "full_rank"         # diagonal | full_rank
//! seeds = [0, 1, 2]
//! init_log_std = 0.0           # initial log standard deviation of q
//! hidden_units = 50            # BNN models only
//!
//! [data]
//! source = "synth"             # synth | libsvm | table
//! size = 200                   # rows (precincts for count tables)
//! features = 10                # classification / regression synth
//! ethnicities = 3              # count synth
//! seed = 0
//! # source = "libsvm", path = "a1a.txt"
//! # source = "table", path = "wine.csv", target = "quality"
//!
//! [optimizer]
//! learning_rate = 1e-3         # a number, a list, or { min, max, count } (log-uniform)
//! momentum = 0.9
//! time_budget = 60.0           # seconds
//! # step_budget = 2000        # if set, run this many steps instead of using the clock
//! minibatch = 5
//! warm_start_steps = 300
//! warm_start_rate = 1e-5
//! record_every = 25            # steps between ELBO records
//! elbo_samples = 100
//!
//! [selection]
//! mode = "cv_auto"             # base_only | cv_auto | cv_fixed | pool
//! control_variates = ["c1", "c2", "c3"]
//! support = "101"              # cv_fixed only
//! members = ["Rep", "Miller", "STL"]   # pool only
//! m = 400                      # default 400, 200 for full-rank log_reg
//! fractions = [0.0, 0.1, 0.5]
//! base = "rep"                 # rep | stl
//! profile_warmup = 2
//! profile_reps = 7
//! # costs = { t0 = 1e-3, t = [1e-4, 5e-4, 1e-5] }   # skip profiling
//! ```

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::estimators::BaseEstimator;
use crate::selection::{CostProfile, DEFAULT_M, DEFAULT_M_FULL_RANK_LOGREG};
use crate::vi::{Family, ModelKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    #[serde(default = "default_family")]
    pub family: Family,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub init_log_std: f64,
    #[serde(default = "default_hidden")]
    pub hidden_units: usize,
    pub data: DataSource,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub selection: SelectionConfig,
    /// Output directory for traces and the summary.
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_family() -> Family {
    Family::Diagonal
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_hidden() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synth {
        size: usize,
        #[serde(default)]
        features: Option<usize>,
        #[serde(default)]
        ethnicities: Option<usize>,
        #[serde(default)]
        seed: u64,
    },
    Libsvm {
        path: PathBuf,
    },
    /// Regression tables need `target`; count tables use the columns
    /// `eth`, `precinct`, `stops`, `arrests`.
    Table {
        path: PathBuf,
        #[serde(default)]
        target: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LearningRate {
    Single(f64),
    List(Vec<f64>),
    Grid { min: f64, max: f64, count: usize },
}

impl LearningRate {
    pub fn values(&self) -> Vec<f64> {
        match self {
            LearningRate::Single(v) => vec![*v],
            LearningRate::List(v) => v.clone(),
            LearningRate::Grid { min, max, count } => log_uniform_grid(*min, *max, *count),
        }
    }
}

/// `count` points evenly spaced in log scale from `min` to `max`.
pub fn log_uniform_grid(min: f64, max: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![min],
        _ => {
            let (lo, hi) = (min.ln(), max.ln());
            (0..count)
                .map(|k| (lo + (hi - lo) * k as f64 / (count - 1) as f64).exp())
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: LearningRate,
    pub momentum: f64,
    pub time_budget: f64,
    pub step_budget: Option<u64>,
    pub minibatch: usize,
    pub warm_start_steps: u64,
    pub warm_start_rate: f64,
    pub record_every: u64,
    pub elbo_samples: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: LearningRate::Single(1e-3),
            momentum: 0.9,
            time_budget: 60.0,
            step_budget: None,
            minibatch: 5,
            warm_start_steps: 300,
            warm_start_rate: 1e-5,
            record_every: 25,
            elbo_samples: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    BaseOnly,
    CvAuto,
    CvFixed,
    Pool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub mode: ModeName,
    pub control_variates: Vec<String>,
    pub support: Option<String>,
    pub members: Option<Vec<String>>,
    pub m: Option<usize>,
    pub fractions: Vec<f64>,
    pub base: BaseEstimator,
    pub profile_warmup: usize,
    pub profile_reps: usize,
    pub costs: Option<CostProfile>,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            mode: ModeName::CvAuto,
            control_variates: vec!["c1".into(), "c2".into(), "c3".into()],
            support: None,
            members: None,
            m: None,
            fractions: vec![0.0, 0.1, 0.5],
            base: BaseEstimator::Rep,
            profile_warmup: 2,
            profile_reps: 7,
            costs: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// Number of draws for `Ĝ²` statistics.
    pub fn sample_count(&self) -> usize {
        self.selection.m.unwrap_or(
            if self.model == ModelKind::LogReg && self.family == Family::FullRank {
                DEFAULT_M_FULL_RANK_LOGREG
            } else {
                DEFAULT_M
            },
        )
    }
}
