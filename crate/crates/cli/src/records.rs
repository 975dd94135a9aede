//! CSV row types and the reader/writer used for every report file.

use std::fs::File;
use std::io::{self, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const METRICS_CSV: &str = "metrics.csv";
pub const VARIANCE_CSV: &str = "variance_report.csv";
pub const PREDICTIONS_CSV: &str = "predictions.csv";
pub const HAMMING_CSV: &str = "hamming.csv";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const HISTORY_CSV: &str = "train_history.csv";
pub const CONFIG_SNAPSHOT: &str = "emitted-config.json";
pub const SUMMARY_JSON: &str = "summary.json";
pub const FAILURE_MARKER: &str = "FAILED";

/// Method label used for rows that describe the unpruned model.
pub const BASELINE: &str = "baseline";
/// Update-mode label for rows without a pruning step.
pub const NO_UPDATE: &str = "none";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub method: String,
    pub update_mode: String,
    pub reflow: bool,
    pub sparsity: f64,
    pub accuracy_pct: f64,
    pub modal_fraction: f64,
    pub final_variance_ratio: f64,
    pub wall_ms: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceCsvRow {
    pub method: String,
    pub update_mode: String,
    pub reflow: bool,
    pub sparsity: f64,
    pub layer_index: usize,
    pub mean_orig: f64,
    pub var_orig: f64,
    pub mean_pruned: f64,
    pub var_pruned: f64,
    pub ratio: f64,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionCsvRow {
    pub method: String,
    pub update_mode: String,
    pub reflow: bool,
    pub sparsity: f64,
    pub class_index: usize,
    pub count: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HammingCsvRow {
    pub mask_a: String,
    pub mask_b: String,
    pub raw: usize,
    pub normalized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCsvRow {
    pub method: String,
    pub update_mode: String,
    pub sparsity: f64,
    pub step_k: usize,
    pub layer_index: Option<usize>,
    pub direction: String,
    pub cumulative_accuracy_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCsvRow {
    pub sparsity: f64,
    /// `batch_count` or `batch_size`: which knob this row varies.
    pub varied: String,
    pub batch_count: usize,
    pub batch_size: usize,
    pub accuracy_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryCsvRow {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy_pct: f64,
}

/// Writes a header plus one line per row: comma-separated, LF endings.
pub fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> io::Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .has_headers(false)
        .from_writer(File::create(path)?);
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    w.into_inner().map_err(|e| e.into_error())?.flush()
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, csv::Error> {
    csv::Reader::from_path(path)?.deserialize().collect()
}

pub fn write_text(path: &Path, text: &str) -> io::Result<()> {
    File::create(path)?.write_all(text.as_bytes())
}

pub const METRICS_HEADER: &[&str] = &[
    "run_id",
    "method",
    "update_mode",
    "reflow",
    "sparsity",
    "accuracy_pct",
    "modal_fraction",
    "final_variance_ratio",
    "wall_ms",
];
pub const VARIANCE_HEADER: &[&str] = &[
    "method",
    "update_mode",
    "reflow",
    "sparsity",
    "layer_index",
    "mean_orig",
    "var_orig",
    "mean_pruned",
    "var_pruned",
    "ratio",
    "eta",
];
pub const PREDICTIONS_HEADER: &[&str] =
    &["method", "update_mode", "reflow", "sparsity", "class_index", "count", "fraction"];
pub const HAMMING_HEADER: &[&str] = &["mask_a", "mask_b", "raw", "normalized"];
pub const SWEEP_HEADER: &[&str] = &[
    "method",
    "update_mode",
    "sparsity",
    "step_k",
    "layer_index",
    "direction",
    "cumulative_accuracy_pct",
];
pub const ABLATION_HEADER: &[&str] = &["sparsity", "varied", "batch_count", "batch_size", "accuracy_pct"];
pub const HISTORY_HEADER: &[&str] = &["epoch", "loss", "accuracy_pct"];
