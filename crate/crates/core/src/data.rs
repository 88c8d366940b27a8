//! Dataset ingestion, seeded synthetic stand-ins and optimization traces.
//!
//! # Formats
//!
//! **libsvm** — one example per line: `<label> <index>:<value> ...`. Labels
//! are `0`/`1` or `-1`/`+1` (`0` maps to `-1`); indices are 1-based positive
//! integers, mapped to 0-based internally. Blank lines and lines starting
//! with `#` are skipped. Anything else is an error naming the line.
//!
//! **tables** — comma-separated text with a header row, `.` as decimal point.
//!
//! **traces** — comma-separated with header
//! `wall_seconds,step,elbo,selection,g2hat,that,seed`; `g2hat`/`that` may be
//! empty when no selection statistics exist for that period.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::substream;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{0} contains no records")]
    Empty(String),
    #[error("missing column '{0}'")]
    MissingColumn(String),
    #[error("row {row}, column '{column}': non-numeric value '{value}'")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },
    #[error("trace header mismatch: expected '{expected}', found '{found}'")]
    HeaderMismatch { expected: String, found: String },
    #[error("trace wall clock goes backwards at record {index} (seed {seed})")]
    NonMonotonic { index: usize, seed: u64 },
    #[error("invalid data: {0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Sparse binary classification data with `±1` labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationDataset {
    /// `(0-based index, value)` pairs per row.
    pub rows: Vec<Vec<(usize, f64)>>,
    pub labels: Vec<i8>,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Standardization {
    pub target: String,
    pub columns: Vec<String>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Constant columns removed before standardizing.
    pub dropped: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionDataset {
    pub features: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    pub standardization: Standardization,
}

impl RegressionDataset {
    pub fn n_features(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    /// First `n` rows (or all of them).
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.targets.len());
        Self {
            features: self.features[..n].to_vec(),
            targets: self.targets[..n].to_vec(),
            standardization: self.standardization.clone(),
        }
    }
}

/// Stop (`Y`) and arrest (`N`) counts, row-major `[ethnicity][precinct]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountTable {
    pub n_ethnicities: usize,
    pub n_precincts: usize,
    pub stops: Vec<u64>,
    pub arrests: Vec<u64>,
}

impl CountTable {
    pub fn validate(&self) -> Result<(), DataError> {
        let cells = self.n_ethnicities * self.n_precincts;
        if cells == 0 {
            return Err(DataError::Invalid("count table has no cells".into()));
        }
        if self.stops.len() != cells || self.arrests.len() != cells {
            return Err(DataError::Invalid(format!(
                "count table shape {}x{} does not match {} stops / {} arrests",
                self.n_ethnicities,
                self.n_precincts,
                self.stops.len(),
                self.arrests.len()
            )));
        }
        if let Some(k) = self.arrests.iter().position(|&n| n == 0) {
            return Err(DataError::Invalid(format!(
                "arrest count must be >= 1 (ethnicity {}, precinct {})",
                k / self.n_precincts,
                k % self.n_precincts
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Dataset {
    Classification(ClassificationDataset),
    Regression(RegressionDataset),
    Counts(CountTable),
}

impl Dataset {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Dataset::Classification(_) => "classification",
            Dataset::Regression(_) => "regression",
            Dataset::Counts(_) => "count-table",
        }
    }
}

pub fn parse_libsvm(text: &str) -> Result<ClassificationDataset, DataError> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut dim = 0;
    for (k, raw) in text.lines().enumerate() {
        let line_no = k + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let perr = |message: String| DataError::Parse {
            line: line_no,
            message,
        };
        let mut tokens = line.split_whitespace();
        let label_tok = tokens.next().expect("non-empty line has a token");
        let label = match label_tok.parse::<f64>() {
            Ok(v) if v == 1.0 => 1,
            Ok(v) if v == 0.0 || v == -1.0 => -1,
            _ => {
                return Err(perr(format!(
                    "label '{label_tok}' is not one of 0, 1, -1, +1"
                )))
            }
        };
        let mut row = Vec::new();
        for tok in tokens {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| perr(format!("expected index:value, got '{tok}'")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| perr(format!("bad feature index '{idx}'")))?;
            if idx == 0 {
                return Err(perr("feature indices are 1-based".into()));
            }
            let val: f64 = val
                .parse()
                .map_err(|_| perr(format!("bad feature value '{val}'")))?;
            if !val.is_finite() {
                return Err(perr(format!("non-finite feature value '{val}'")));
            }
            dim = dim.max(idx);
            row.push((idx - 1, val));
        }
        rows.push(row);
        labels.push(label);
    }
    if rows.is_empty() {
        return Err(DataError::Empty("libsvm input".into()));
    }
    Ok(ClassificationDataset { rows, labels, dim })
}

pub fn load_libsvm(path: impl AsRef<Path>) -> Result<ClassificationDataset, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_libsvm(&text).map_err(|e| match e {
        DataError::Empty(_) => DataError::Empty(path.display().to_string()),
        other => other,
    })
}

/// How to interpret a delimited table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableSpec {
    /// Every column except `target` is a feature.
    Regression { target: String },
    /// Long-format counts pivoted into an ethnicity × precinct table.
    Counts {
        ethnicity: String,
        precinct: String,
        stops: String,
        arrests: String,
    },
}

impl TableSpec {
    pub fn counts_default() -> Self {
        TableSpec::Counts {
            ethnicity: "eth".into(),
            precinct: "precinct".into(),
            stops: "stops".into(),
            arrests: "arrests".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Table {
    Regression(RegressionDataset),
    Counts(CountTable),
}

impl From<Table> for Dataset {
    fn from(t: Table) -> Self {
        match t {
            Table::Regression(r) => Dataset::Regression(r),
            Table::Counts(c) => Dataset::Counts(c),
        }
    }
}

fn read_csv_records(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>), DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| DataError::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| DataError::Parse {
            line: k + 2,
            message: e.to_string(),
        })?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}

fn column(header: &[String], name: &str) -> Result<usize, DataError> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| DataError::MissingColumn(name.to_string()))
}

fn numeric(rows: &[Vec<String>], header: &[String], col: usize) -> Result<Vec<f64>, DataError> {
    rows.iter()
        .enumerate()
        .map(|(r, row)| {
            row[col]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| DataError::NonNumeric {
                    row: r + 1,
                    column: header[col].clone(),
                    value: row[col].clone(),
                })
        })
        .collect()
}

fn count(v: f64, row: usize, column: &str) -> Result<u64, DataError> {
    if v < 0.0 || v.fract() != 0.0 {
        return Err(DataError::Invalid(format!(
            "row {row}, column '{column}': {v} is not a count"
        )));
    }
    Ok(v as u64)
}

pub fn parse_table(text: &str, spec: &TableSpec) -> Result<Table, DataError> {
    let (header, rows) = read_csv_records(text)?;
    if rows.is_empty() {
        return Err(DataError::Empty("table".into()));
    }
    match spec {
        TableSpec::Regression { target } => {
            let t = column(&header, target)?;
            let targets = numeric(&rows, &header, t)?;
            let mut std_record = Standardization {
                target: target.clone(),
                ..Default::default()
            };
            let mut cols = Vec::new();
            for c in (0..header.len()).filter(|&c| c != t) {
                let values = numeric(&rows, &header, c)?;
                let n = values.len() as f64;
                let mean = values.iter().sum::<f64>() / n;
                let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                if var <= 0.0 {
                    std_record.dropped.push(header[c].clone());
                    continue;
                }
                let sd = var.sqrt();
                std_record.columns.push(header[c].clone());
                std_record.means.push(mean);
                std_record.stds.push(sd);
                cols.push(
                    values
                        .into_iter()
                        .map(|v| (v - mean) / sd)
                        .collect::<Vec<f64>>(),
                );
            }
            let features = (0..rows.len())
                .map(|r| cols.iter().map(|c| c[r]).collect())
                .collect();
            Ok(Table::Regression(RegressionDataset {
                features,
                targets,
                standardization: std_record,
            }))
        }
        TableSpec::Counts {
            ethnicity,
            precinct,
            stops,
            arrests,
        } => {
            let (ce, cp) = (column(&header, ethnicity)?, column(&header, precinct)?);
            let ys = numeric(&rows, &header, column(&header, stops)?)?;
            let ns = numeric(&rows, &header, column(&header, arrests)?)?;
            let mut eth_ids: HashMap<String, usize> = HashMap::new();
            let mut prec_ids: HashMap<String, usize> = HashMap::new();
            for row in &rows {
                let n = eth_ids.len();
                eth_ids.entry(row[ce].clone()).or_insert(n);
                let n = prec_ids.len();
                prec_ids.entry(row[cp].clone()).or_insert(n);
            }
            let (ne, np) = (eth_ids.len(), prec_ids.len());
            let mut cells: Vec<Option<(u64, u64)>> = vec![None; ne * np];
            for (r, row) in rows.iter().enumerate() {
                let k = eth_ids[&row[ce]] * np + prec_ids[&row[cp]];
                if cells[k].is_some() {
                    return Err(DataError::Invalid(format!(
                        "row {}: duplicate ({}, {}) cell",
                        r + 1,
                        row[ce],
                        row[cp]
                    )));
                }
                cells[k] = Some((count(ys[r], r + 1, stops)?, count(ns[r], r + 1, arrests)?));
            }
            if cells.iter().any(Option::is_none) {
                return Err(DataError::Invalid(
                    "count table is missing ethnicity/precinct cells".into(),
                ));
            }
            let table = CountTable {
                n_ethnicities: ne,
                n_precincts: np,
                stops: cells.iter().map(|c| c.unwrap().0).collect(),
                arrests: cells.iter().map(|c| c.unwrap().1).collect(),
            };
            table.validate()?;
            Ok(Table::Counts(table))
        }
    }
}

pub fn load_table(path: impl AsRef<Path>, spec: &TableSpec) -> Result<Table, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_table(&text, spec)
}

/// Shape of a synthetic dataset; the `size` argument of [`synth_dataset`] is
/// the number of rows (or of precincts for count tables).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    Classification { features: usize },
    Regression { features: usize },
    Counts { ethnicities: usize },
}

/// Generating parameters of a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub enum Planted {
    /// `[bias, w_1..w_p]` with `P(y = +1) = 1 / (1 + exp(bias + w·x))`.
    Logistic { weights: Vec<f64> },
    /// `y = b2 + w2·relu(W1 x + b1) + noise_std · eps`.
    Network {
        w1: Vec<Vec<f64>>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: f64,
        noise_std: f64,
    },
    /// Per-cell Poisson rates.
    Poisson { rates: Vec<f64> },
}

const PLANTED_HIDDEN: usize = 10;
const PLANTED_NOISE: f64 = 0.3;

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Seeded synthetic dataset together with the parameters that generated it.
pub fn synth_with_truth(kind: SynthKind, size: usize, seed: u64) -> (Dataset, Planted) {
    let size = size.max(1);
    let mut params_rng = substream(seed, 0);
    let mut rng = substream(seed, 1);
    match kind {
        SynthKind::Classification { features } => {
            let weights: Vec<f64> = (0..=features).map(|_| normal(&mut params_rng)).collect();
            let mut rows = Vec::with_capacity(size);
            let mut labels = Vec::with_capacity(size);
            for _ in 0..size {
                let x: Vec<f64> = (0..features).map(|_| normal(&mut rng)).collect();
                let s = weights[0] + x.iter().zip(&weights[1..]).map(|(a, b)| a * b).sum::<f64>();
                let p_pos = 1.0 / (1.0 + s.exp());
                labels.push(if rng.random::<f64>() < p_pos { 1 } else { -1 });
                rows.push(x.into_iter().enumerate().collect());
            }
            (
                Dataset::Classification(ClassificationDataset {
                    rows,
                    labels,
                    dim: features,
                }),
                Planted::Logistic { weights },
            )
        }
        SynthKind::Regression { features } => {
            let scale = 1.0 / (features.max(1) as f64).sqrt();
            let w1: Vec<Vec<f64>> = (0..PLANTED_HIDDEN)
                .map(|_| {
                    (0..features)
                        .map(|_| scale * normal(&mut params_rng))
                        .collect()
                })
                .collect();
            let b1: Vec<f64> = (0..PLANTED_HIDDEN)
                .map(|_| 0.5 * normal(&mut params_rng))
                .collect();
            let w2: Vec<f64> = (0..PLANTED_HIDDEN)
                .map(|_| normal(&mut params_rng))
                .collect();
            let b2 = normal(&mut params_rng);
            let mut features_out = Vec::with_capacity(size);
            let mut targets = Vec::with_capacity(size);
            for _ in 0..size {
                let x: Vec<f64> = (0..features).map(|_| normal(&mut rng)).collect();
                let f = planted_network(&w1, &b1, &w2, b2, &x);
                targets.push(f + PLANTED_NOISE * normal(&mut rng));
                features_out.push(x);
            }
            let standardization = Standardization {
                target: "y".into(),
                columns: (0..features).map(|j| format!("x{j}")).collect(),
                means: vec![0.0; features],
                stds: vec![1.0; features],
                dropped: Vec::new(),
            };
            (
                Dataset::Regression(RegressionDataset {
                    features: features_out,
                    targets,
                    standardization,
                }),
                Planted::Network {
                    w1,
                    b1,
                    w2,
                    b2,
                    noise_std: PLANTED_NOISE,
                },
            )
        }
        SynthKind::Counts { ethnicities } => {
            let ethnicities = ethnicities.max(1);
            let precincts = size;
            let mu = -0.5;
            let alpha: Vec<f64> = (0..ethnicities)
                .map(|_| 0.5 * normal(&mut params_rng))
                .collect();
            let beta: Vec<f64> = (0..precincts)
                .map(|_| 0.5 * normal(&mut params_rng))
                .collect();
            let arrivals = Poisson::new(20.0).expect("valid rate");
            let mut stops = Vec::with_capacity(ethnicities * precincts);
            let mut arrests = Vec::with_capacity(ethnicities * precincts);
            let mut rates = Vec::with_capacity(ethnicities * precincts);
            for a in &alpha {
                for b in &beta {
                    let n = 1 + arrivals.sample(&mut rng) as u64;
                    let rate = (mu + a + b + (n as f64).ln()).exp();
                    let y = Poisson::new(rate).expect("positive rate").sample(&mut rng) as u64;
                    arrests.push(n);
                    stops.push(y);
                    rates.push(rate);
                }
            }
            (
                Dataset::Counts(CountTable {
                    n_ethnicities: ethnicities,
                    n_precincts: precincts,
                    stops,
                    arrests,
                }),
                Planted::Poisson { rates },
            )
        }
    }
}

pub fn planted_network(w1: &[Vec<f64>], b1: &[f64], w2: &[f64], b2: f64, x: &[f64]) -> f64 {
    let mut out = b2;
    for ((row, b), v) in w1.iter().zip(b1).zip(w2) {
        let pre = b + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
        out += v * pre.max(0.0);
    }
    out
}

/// Seeded synthetic stand-in for the named dataset kind.
pub fn synth_dataset(kind: SynthKind, size: usize, seed: u64) -> Dataset {
    synth_with_truth(kind, size, seed).0
}

/// One row of an "ELBO vs time" trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub wall_seconds: f64,
    pub step: u64,
    pub elbo: f64,
    /// `cv:<bits>` (bit `i` set when control variate `i+1` is in use) or `pool:<label>`.
    pub selection: String,
    pub g2hat: Option<f64>,
    pub that: Option<f64>,
    pub seed: u64,
}

pub const TRACE_HEADER: &str = "wall_seconds,step,elbo,selection,g2hat,that,seed";

fn check_monotone(records: &[TraceRecord]) -> Result<(), DataError> {
    for (i, pair) in records.windows(2).enumerate() {
        if pair[0].seed == pair[1].seed && pair[1].wall_seconds < pair[0].wall_seconds {
            return Err(DataError::NonMonotonic {
                index: i + 1,
                seed: pair[1].seed,
            });
        }
    }
    Ok(())
}

pub fn write_trace(path: impl AsRef<Path>, records: &[TraceRecord]) -> Result<(), DataError> {
    let path = path.as_ref();
    check_monotone(records)?;
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| DataError::Io {
            path: path.to_path_buf(),
            source: io::Error::other(e),
        })?;
    let csv_err = |e: csv::Error| DataError::Io {
        path: path.to_path_buf(),
        source: io::Error::other(e),
    };
    writer
        .write_record(TRACE_HEADER.split(','))
        .map_err(csv_err)?;
    for r in records {
        writer.serialize(r).map_err(csv_err)?;
    }
    writer.flush().map_err(io_err(path))
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<TraceRecord>, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let first = text.lines().next().unwrap_or("");
    if first.trim() != TRACE_HEADER {
        return Err(DataError::HeaderMismatch {
            expected: TRACE_HEADER.into(),
            found: first.to_string(),
        });
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (k, rec) in reader.deserialize().enumerate() {
        out.push(rec.map_err(|e: csv::Error| DataError::Parse {
            line: k + 2,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
