//! Trial logs and the search metrics computed from them.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::ControllerParams;
use crate::space::ModelSpec;

pub const DEFAULT_TOP_N: usize = 10;
pub const DEFAULT_STRIDE: usize = 5;
pub const LOG_FORMAT: &str = "taml-trials/1";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("trial log has no successful trials")]
    EmptyLog,
    #[error("top-N needs N >= 1")]
    ZeroN,
    #[error("stride must be at least 1")]
    ZeroStride,
    #[error("trial index {got} out of order (expected {expected})")]
    OutOfOrder { expected: u64, got: u64 },
    #[error("trial log i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("trial log line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// One sample-evaluate-update cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    /// Position in completion order, starting at 0.
    pub trial: u64,
    pub task: usize,
    pub task_name: String,
    pub spec: ModelSpec,
    /// `None` when the evaluation failed.
    pub val: Option<f64>,
    pub test: Option<f64>,
    /// Controller parameter version the spec was sampled from.
    pub version: u64,
    /// Cumulative evaluation cost up to and including this trial.
    pub wall_cost: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TrialRecord {
    pub fn succeeded(&self) -> bool {
        self.val.is_some() && self.test.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogMeta {
    pub format: String,
    pub mode: String,
    pub seed: u64,
    pub space_hash: String,
    pub config_digest: String,
}

impl LogMeta {
    pub fn new(mode: impl Into<String>, seed: u64, space_hash: impl Into<String>, config_digest: impl Into<String>) -> Self {
        Self {
            format: LOG_FORMAT.to_string(),
            mode: mode.into(),
            seed,
            space_hash: space_hash.into(),
            config_digest: config_digest.into(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: LogMeta,
}

/// Append-only record of a run. Stored as JSON lines: a header object
/// followed by one object per trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialLog {
    meta: LogMeta,
    records: Vec<TrialRecord>,
}

impl TrialLog {
    pub fn new(meta: LogMeta) -> Self {
        Self {
            meta,
            records: Vec::new(),
        }
    }

    pub fn meta(&self) -> &LogMeta {
        &self.meta
    }

    pub fn records(&self) -> &[TrialRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Appends a record whose index must equal the current length.
    pub fn push(&mut self, record: TrialRecord) -> Result<(), MetricsError> {
        let expected = self.records.len() as u64;
        if record.trial != expected {
            return Err(MetricsError::OutOfOrder {
                expected,
                got: record.trial,
            });
        }
        self.records.push(record);
        Ok(())
    }

    /// Records of one task, in log order.
    pub fn for_task(&self, task: usize) -> Vec<TrialRecord> {
        self.records.iter().filter(|r| r.task == task).cloned().collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        let header = HeaderLine {
            header: self.meta.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self, MetricsError> {
        let mut lines = reader.lines().enumerate().filter(|(_, l)| !matches!(l, Ok(s) if s.trim().is_empty()));
        let parse_err = |line: usize, e: serde_json::Error| MetricsError::Parse {
            line: line + 1,
            message: e.to_string(),
        };
        let (i, first) = lines.next().ok_or(MetricsError::Parse {
            line: 1,
            message: "missing header line".into(),
        })?;
        let header: HeaderLine = serde_json::from_str(&first?).map_err(|e| parse_err(i, e))?;
        let mut log = TrialLog::new(header.header);
        for (i, line) in lines {
            let record: TrialRecord = serde_json::from_str(&line?).map_err(|e| parse_err(i, e))?;
            log.push(record).map_err(|e| MetricsError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(log)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MetricsError> {
        let f = fs::File::create(path)?;
        self.write_jsonl(BufWriter::new(f))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MetricsError> {
        let f = fs::File::open(path)?;
        Self::read_jsonl(BufReader::new(f))
    }
}

/// Mean validation and test reward of the selected top-N trials.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TopN {
    pub val: f64,
    pub test: f64,
}

/// Running top-N by validation reward. Ties keep the earlier trial because
/// later pushes always sort after equal values.
#[derive(Debug, Clone)]
pub struct TopNTracker {
    n: usize,
    best: Vec<(f64, f64)>,
}

impl TopNTracker {
    pub fn new(n: usize) -> Result<Self, MetricsError> {
        if n == 0 {
            return Err(MetricsError::ZeroN);
        }
        Ok(Self {
            n,
            best: Vec::with_capacity(n + 1),
        })
    }

    pub fn push(&mut self, record: &TrialRecord) {
        let (Some(val), Some(test)) = (record.val, record.test) else {
            return;
        };
        if self.best.len() == self.n && self.best[self.n - 1].0 >= val {
            return;
        }
        let pos = self.best.partition_point(|&(v, _)| v >= val);
        self.best.insert(pos, (val, test));
        self.best.truncate(self.n);
    }

    pub fn current(&self) -> Option<TopN> {
        if self.best.is_empty() {
            return None;
        }
        let k = self.best.len() as f64;
        Some(TopN {
            val: self.best.iter().map(|b| b.0).sum::<f64>() / k,
            test: self.best.iter().map(|b| b.1).sum::<f64>() / k,
        })
    }
}

/// Top-N over successful trials with `trial <= up_to_trial` (all when `None`).
/// Averages over every selected trial when fewer than N qualify.
pub fn accuracy_top_n(records: &[TrialRecord], n: usize, up_to_trial: Option<u64>) -> Result<TopN, MetricsError> {
    let mut tracker = TopNTracker::new(n)?;
    for r in records.iter().filter(|r| up_to_trial.is_none_or(|t| r.trial <= t)) {
        tracker.push(r);
    }
    tracker.current().ok_or(MetricsError::EmptyLog)
}

/// One learning-curve row: top-N after the first `trials` records.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub trials: usize,
    pub val: f64,
    pub test: f64,
}

/// Top-N after every `stride` records and after the last one. Points before
/// the first successful trial are omitted.
pub fn learning_curve(records: &[TrialRecord], n: usize, stride: usize) -> Result<Vec<CurvePoint>, MetricsError> {
    if stride == 0 {
        return Err(MetricsError::ZeroStride);
    }
    let mut tracker = TopNTracker::new(n)?;
    let mut out = Vec::new();
    for (i, r) in records.iter().enumerate() {
        tracker.push(r);
        let t = i + 1;
        if t % stride == 0 || t == records.len() {
            if let Some(c) = tracker.current() {
                out.push(CurvePoint {
                    trials: t,
                    val: c.val,
                    test: c.test,
                });
            }
        }
    }
    Ok(out)
}

/// Smallest evaluated trial count whose validation top-N reaches `theta`.
pub fn trials_to_threshold(
    records: &[TrialRecord],
    theta: f64,
    n: usize,
    stride: usize,
) -> Result<Option<usize>, MetricsError> {
    Ok(learning_curve(records, n, stride)?
        .into_iter()
        .find(|p| p.val >= theta)
        .map(|p| p.trials))
}

/// CSV with header `trial,val_topN,test_topN`.
pub fn export_learning_curve(records: &[TrialRecord], n: usize, stride: usize) -> Result<String, MetricsError> {
    let mut s = String::from("trial,val_topN,test_topN\n");
    for p in learning_curve(records, n, stride)? {
        writeln!(s, "{},{},{}", p.trials, p.val, p.test).expect("string write");
    }
    Ok(s)
}

/// Pairwise cosine similarity. A zero row is similar to nothing, itself
/// included.
pub fn cosine_similarity_matrix(rows: &[&[f64]]) -> Vec<Vec<f64>> {
    let norms: Vec<f64> = rows.iter().map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    rows.iter()
        .enumerate()
        .map(|(i, a)| {
            rows.iter()
                .enumerate()
                .map(|(j, b)| {
                    if norms[i] == 0.0 || norms[j] == 0.0 {
                        0.0
                    } else if i == j {
                        1.0
                    } else {
                        let dot: f64 = a.iter().zip(*b).map(|(x, y)| x * y).sum();
                        (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0)
                    }
                })
                .collect()
        })
        .collect()
}

/// Cosine similarity between every pair of task embeddings.
pub fn embedding_similarity(params: &ControllerParams) -> Vec<Vec<f64>> {
    let rows: Vec<&[f64]> = (0..params.n_tasks())
        .map(|t| params.task_embedding(t).expect("task in range"))
        .collect();
    cosine_similarity_matrix(&rows)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// CSV matrix with task names along the first row and column.
pub fn export_similarity_csv(names: &[String], matrix: &[Vec<f64>]) -> String {
    let mut s = String::from("task");
    for n in names {
        s.push(',');
        s.push_str(&csv_field(n));
    }
    s.push('\n');
    for (n, row) in names.iter().zip(matrix) {
        s.push_str(&csv_field(n));
        for v in row {
            write!(s, ",{v}").expect("string write");
        }
        s.push('\n');
    }
    s
}
