//! Metrics CSV emission and the run/compare report structures.

use companion_core::dcl::EpochLog;
use companion_core::error::Result;
use serde::Serialize;
use std::io::Write;
use std::path::Path;

/// CSV float format: 9 significant digits, '.' decimal separator.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.8e}")
}

pub const METRICS_HEADER: &str =
    "epoch,train_loss,train_acc,test_acc,mean_consistency,mean_perplexity,logit_variation,seconds";

/// Write one row per epoch under the fixed header. Emitting the same logs
/// twice produces byte-identical files.
pub fn emit_metrics_csv(logs: &[EpochLog], path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for log in logs {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            log.epoch,
            fmt_float(log.train_loss),
            fmt_float(log.train_acc),
            fmt_float(log.test_acc),
            fmt_float(log.mean_consistency),
            fmt_float(log.mean_perplexity),
            fmt_float(log.logit_variation),
            fmt_float(log.seconds),
        ));
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

/// Write the final-epoch histogram as the nested JSON count map.
pub fn emit_histogram_json(log: &EpochLog, path: &Path) -> Result<()> {
    let mut map = serde_json::Map::new();
    for (class, row) in log.hist.to_nested_counts() {
        let mut inner = serde_json::Map::new();
        for (k, count) in row {
            inner.insert(k.to_string(), serde_json::json!(count));
        }
        map.insert(class.to_string(), serde_json::Value::Object(inner));
    }
    let text = serde_json::to_string_pretty(&serde_json::Value::Object(map))
        .expect("histogram serializes");
    std::fs::write(path, text)?;
    Ok(())
}

/// Per-epoch metric series for the report, parallel arrays by epoch.
#[derive(Debug, Clone, Serialize)]
pub struct EpochSeries {
    pub train_loss: Vec<f64>,
    pub train_acc: Vec<f64>,
    pub test_acc: Vec<f64>,
    pub mean_consistency: Vec<f64>,
    pub mean_perplexity: Vec<f64>,
    pub logit_variation: Vec<f64>,
}

impl EpochSeries {
    pub fn from_logs(logs: &[EpochLog]) -> Self {
        EpochSeries {
            train_loss: logs.iter().map(|l| l.train_loss).collect(),
            train_acc: logs.iter().map(|l| l.train_acc).collect(),
            test_acc: logs.iter().map(|l| l.test_acc).collect(),
            mean_consistency: logs.iter().map(|l| l.mean_consistency).collect(),
            mean_perplexity: logs.iter().map(|l| l.mean_perplexity).collect(),
            logit_variation: logs.iter().map(|l| l.logit_variation).collect(),
        }
    }
}

/// Final numbers of one seeded run.
#[derive(Debug, Clone, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub final_train_acc: f64,
    pub final_test_acc: f64,
    pub epochs: EpochSeries,
}

/// Mean and standard error over seeds; the stderr is absent for a single
/// seed (sample std / sqrt(n) needs n >= 2).
#[derive(Debug, Clone, Serialize)]
pub struct Aggregate {
    pub mean_train_acc: f64,
    pub mean_test_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stderr_train_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stderr_test_acc: Option<f64>,
}

pub fn mean_and_stderr(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt() / n.sqrt()))
}

pub fn aggregate(per_seed: &[SeedResult]) -> Aggregate {
    let train: Vec<f64> = per_seed.iter().map(|r| r.final_train_acc).collect();
    let test: Vec<f64> = per_seed.iter().map(|r| r.final_test_acc).collect();
    let (mean_train_acc, stderr_train_acc) = mean_and_stderr(&train);
    let (mean_test_acc, stderr_test_acc) = mean_and_stderr(&test);
    Aggregate {
        mean_train_acc,
        mean_test_acc,
        stderr_train_acc,
        stderr_test_acc,
    }
}

/// report.json for a single-method run.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub kind: &'static str,
    pub method: String,
    pub config: serde_json::Value,
    pub per_seed: Vec<SeedResult>,
    pub summary: Aggregate,
    /// Diagnostic timing; excluded from reproducibility comparisons.
    pub wall_clock_seconds: f64,
}

/// One variant's column in a comparison report.
#[derive(Debug, Clone, Serialize)]
pub struct VariantReport {
    pub label: String,
    pub method: String,
    pub train: serde_json::Value,
    pub per_seed: Vec<SeedResult>,
    pub summary: Aggregate,
}

/// report.json for a comparison.
#[derive(Debug, Clone, Serialize)]
pub struct CompareReport {
    pub kind: &'static str,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub baseline: String,
    pub variants: Vec<VariantReport>,
    /// Per-variant count of seeds where it strictly beats the baseline's
    /// test accuracy.
    pub win_counts: Vec<WinCount>,
    /// Diagnostic timing; excluded from reproducibility comparisons.
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct WinCount {
    pub label: String,
    pub wins_vs_baseline: u32,
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text)?;
    Ok(())
}
