//! Machine-readable outputs: canonical JSON reports, a flat CSV table and
//! JSON-lines traces.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ptp_core::eval::{RunResult, SeedRun};
use ptp_core::trainer::EpochStats;
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::store::write_atomic;

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const TRACE_JSONL: &str = "trace.jsonl";
pub const PREDICTIONS_JSONL: &str = "predictions.jsonl";

/// One seed-averaged result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRow {
    pub dataset: String,
    pub method: String,
    pub mode: String,
    pub shots: usize,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    pub lambda: Option<f64>,
    pub seeds: Vec<u64>,
    pub acc_mean: f64,
    pub acc_per_seed: Vec<f64>,
    /// Category name to seed-averaged accuracy; null when the test split has
    /// no example of the category.
    pub acc_per_class: BTreeMap<String, Option<f64>>,
    pub params: usize,
    pub wall_ms: u64,
}

impl ReportRow {
    pub fn from_result(result: &RunResult, classes: &[String]) -> Self {
        Self {
            dataset: result.dataset.clone(),
            method: result.method.as_str().to_string(),
            mode: result.mode.as_str().to_string(),
            shots: result.shots,
            k: result.k,
            lambda: result.lambda,
            seeds: result.seeds.clone(),
            acc_mean: result.acc_mean,
            acc_per_seed: result.acc_per_seed.clone(),
            acc_per_class: classes.iter().cloned().zip(result.acc_per_class.iter().copied()).collect(),
            params: result.params,
            wall_ms: result.wall_ms,
        }
    }
}

/// A grid point or seed that did not complete.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureRow {
    pub method: String,
    pub shots: usize,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    pub lambda: Option<f64>,
    pub seed: Option<u64>,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<FailureRow>,
}

/// Pretty JSON with object keys in sorted order and a trailing newline.
pub fn canonical_json(value: &impl Serialize) -> String {
    let value = serde_json::to_value(value).expect("report types serialize");
    let mut text = serde_json::to_string_pretty(&value).expect("json values serialize");
    text.push('\n');
    text
}

/// Compact single-line canonical JSON.
fn canonical_line(value: &impl Serialize) -> String {
    let value = serde_json::to_value(value).expect("report types serialize");
    serde_json::to_string(&value).expect("json values serialize")
}

/// Accuracy as a percentage with two decimals.
pub fn percent(acc: f64) -> String {
    format!("{:.2}", acc * 100.0)
}

pub fn to_csv(report: &Report) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "dataset",
        "method",
        "mode",
        "shots",
        "K",
        "lambda",
        "seeds",
        "acc_mean",
        "acc_per_seed",
        "params",
        "wall_ms",
    ])
    .expect("in-memory csv");
    let join = |v: Vec<String>| v.join(";");
    for r in &report.rows {
        w.write_record([
            r.dataset.clone(),
            r.method.clone(),
            r.mode.clone(),
            r.shots.to_string(),
            r.k.map(|k| k.to_string()).unwrap_or_default(),
            r.lambda.map(|l| l.to_string()).unwrap_or_default(),
            join(r.seeds.iter().map(u64::to_string).collect()),
            percent(r.acc_mean),
            join(r.acc_per_seed.iter().map(|a| percent(*a)).collect()),
            r.params.to_string(),
            r.wall_ms.to_string(),
        ])
        .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
}

pub fn write_report(dir: &Path, report: &Report) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    write_atomic(&dir.join(REPORT_JSON), canonical_json(report).as_bytes())?;
    write_atomic(&dir.join(REPORT_CSV), to_csv(report).as_bytes())?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<Report, CliError> {
    let text = fs::read(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_slice(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// One line of `trace.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub epoch: usize,
    pub mean_loss: f64,
    pub r1: f64,
    pub r2: f64,
    pub ce_or_bce: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shots: Option<usize>,
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

impl TraceLine {
    pub fn new(seed: u64, e: &EpochStats) -> Self {
        Self {
            epoch: e.epoch,
            mean_loss: e.mean_loss,
            r1: e.r1,
            r2: e.r2,
            ce_or_bce: e.data_loss,
            seed,
            shots: None,
            k: None,
            lambda: None,
        }
    }
}

pub fn trace_lines(lines: &[TraceLine]) -> String {
    lines.iter().map(|l| canonical_line(l) + "\n").collect()
}

#[derive(Serialize)]
struct PredictionLine<'a> {
    seed: u64,
    predictions: &'a [usize],
}

pub fn prediction_lines(runs: &[SeedRun]) -> String {
    runs.iter()
        .map(|r| {
            canonical_line(&PredictionLine {
                seed: r.seed,
                predictions: &r.predictions,
            }) + "\n"
        })
        .collect()
}
