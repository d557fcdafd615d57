//! CSV schemas written by `bench` and `train` and read back by `plot`.
//!
//! Every row starts with a `schema_version` column; readers reject versions
//! they do not know. Files are UTF-8 with a header row, comma-separated, with
//! `.` as the decimal separator.

use serde::{Deserialize, Serialize};

pub const BENCH_SCHEMA: &str = "bench.v1";
pub const TRAIN_SCHEMA: &str = "train.v1";

pub const STATUS_OK: &str = "ok";
pub const STATUS_OOM: &str = "OOM";

/// One (workload point, optimizer) measurement. Timing columns are empty on
/// `OOM` rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub schema_version: String,
    pub workload: String,
    pub width: usize,
    pub depth: usize,
    pub optimizer: String,
    pub params: usize,
    pub tensors: usize,
    pub status: String,
    pub median_ms: Option<f64>,
    pub p10_ms: Option<f64>,
    pub p90_ms: Option<f64>,
    /// High-water mark of engine scratch memory over the timed steps.
    pub scratch_peak_bytes: Option<usize>,
    /// Bulk passes over parameter-sized memory per step.
    pub passes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub schema_version: String,
    pub task: String,
    pub optimizer: String,
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

pub const BENCH_COLUMNS: [&str; 13] = [
    "schema_version",
    "workload",
    "width",
    "depth",
    "optimizer",
    "params",
    "tensors",
    "status",
    "median_ms",
    "p10_ms",
    "p90_ms",
    "scratch_peak_bytes",
    "passes",
];

pub const TRAIN_COLUMNS: [&str; 6] = ["schema_version", "task", "optimizer", "step", "loss", "lr"];
