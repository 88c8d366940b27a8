//! Run summaries, computed purely from trace records.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};

use super::ExperimentError;
use crate::data::TraceRecord;

/// A selection recorded in a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionEvent {
    pub seed: u64,
    pub wall_seconds: f64,
    pub step: u64,
    pub selection: String,
    pub g2hat: Option<f64>,
    pub that: Option<f64>,
}

/// JSON has no infinities; a diverged run's ELBO is written as `null`.
fn null_as_neg_inf<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
    let v: Vec<Option<f64>> = Vec::deserialize(d)?;
    Ok(v.into_iter()
        .map(|x| x.unwrap_or(f64::NEG_INFINITY))
        .collect())
}

fn null_as_neg_inf_scalar<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
}

/// Results of all seeds at one learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub learning_rate: f64,
    pub seeds: Vec<u64>,
    #[serde(deserialize_with = "null_as_neg_inf")]
    pub final_elbo: Vec<f64>,
    #[serde(deserialize_with = "null_as_neg_inf_scalar")]
    pub mean_final_elbo: f64,
    pub total_steps: Vec<u64>,
    pub wall_seconds: Vec<f64>,
    pub selection_history: Vec<SelectionEvent>,
}

impl RunSummary {
    /// Folds per-seed traces; selection events are the records carrying a
    /// predicted cost.
    pub fn from_traces(learning_rate: f64, traces: &[Vec<TraceRecord>]) -> Self {
        let mut s = RunSummary {
            learning_rate,
            seeds: Vec::new(),
            final_elbo: Vec::new(),
            mean_final_elbo: 0.0,
            total_steps: Vec::new(),
            wall_seconds: Vec::new(),
            selection_history: Vec::new(),
        };
        for trace in traces {
            let Some(last) = trace.last() else { continue };
            s.seeds.push(last.seed);
            s.final_elbo.push(last.elbo);
            s.total_steps.push(last.step);
            s.wall_seconds.push(last.wall_seconds);
            s.selection_history
                .extend(
                    trace
                        .iter()
                        .filter(|r| r.that.is_some())
                        .map(|r| SelectionEvent {
                            seed: r.seed,
                            wall_seconds: r.wall_seconds,
                            step: r.step,
                            selection: r.selection.clone(),
                            g2hat: r.g2hat,
                            that: r.that,
                        }),
                );
        }
        let n = s.final_elbo.len().max(1) as f64;
        s.mean_final_elbo = s.final_elbo.iter().sum::<f64>() / n;
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub runs: Vec<RunSummary>,
}

impl ExperimentSummary {
    /// The learning rate with the highest mean final ELBO.
    pub fn best(&self) -> Option<&RunSummary> {
        self.runs
            .iter()
            .max_by(|a, b| a.mean_final_elbo.total_cmp(&b.mean_final_elbo))
    }

    pub fn write_json(&self, path: &Path) -> Result<(), ExperimentError> {
        let text = serde_json::to_string_pretty(self).expect("summary serializes");
        fs::write(path, text).map_err(|source| ExperimentError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read_json(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text)
            .map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))
    }
}
