//! Serialized outputs: training metrics CSV, estimate JSON and the
//! evaluation tables.

use std::io::Write;

use reweight_core::aggregator::EstimateReport;
use reweight_core::colorlib::ErrorStats;
use reweight_core::trainer::EpochMetrics;
use serde::Serialize;

/// One line of `metrics.csv`. The `val_*` columns are empty when no
/// validation set was given.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub phase: &'static str,
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub task_loss: f64,
    pub reg_loss: f64,
    pub lambda: f64,
    pub learning_rate: f64,
    pub val_mean: Option<f64>,
    pub val_median: Option<f64>,
    pub val_trimean: Option<f64>,
    pub val_best25: Option<f64>,
    pub val_worst25: Option<f64>,
}

impl From<&EpochMetrics> for MetricsRow {
    fn from(m: &EpochMetrics) -> Self {
        let v = m.validation;
        MetricsRow {
            phase: m.phase,
            epoch: m.epoch,
            step: m.step,
            loss: m.loss,
            task_loss: m.task_loss,
            reg_loss: m.reg_loss,
            lambda: m.lambda,
            learning_rate: m.learning_rate,
            val_mean: v.map(|s| s.mean),
            val_median: v.map(|s| s.median),
            val_trimean: v.map(|s| s.trimean),
            val_best25: v.map(|s| s.best25),
            val_worst25: v.map(|s| s.worst25),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatchJson {
    pub grid_index: usize,
    pub illuminant: [f64; 3],
    pub confidence: Option<f64>,
}

/// JSON form of an [`EstimateReport`].
///
/// ```json
/// {
///   "source": "scene.ppm",
///   "global": [0.31, 0.36, 0.33],
///   "method_used": "weighted",
///   "angular_error": null,
///   "per_patch": [{"grid_index": 0, "illuminant": [..], "confidence": 0.8}, ...]
/// }
/// ```
///
/// `method_used` is `median`, `weighted` or `fallback_median`;
/// `confidence` is null for networks without a confidence branch;
/// `angular_error` is in degrees and only present with a ground truth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportJson {
    pub source: String,
    pub global: [f64; 3],
    pub method_used: &'static str,
    pub angular_error: Option<f64>,
    pub per_patch: Vec<PatchJson>,
}

impl ReportJson {
    pub fn new(source: impl Into<String>, r: &EstimateReport) -> Self {
        ReportJson {
            source: source.into(),
            global: r.global.rgb(),
            method_used: r.method_used.as_str(),
            angular_error: r.angular_error,
            per_patch: r
                .per_patch
                .iter()
                .map(|p| PatchJson {
                    grid_index: p.grid_index,
                    illuminant: p.illuminant.rgb(),
                    confidence: p.confidence,
                })
                .collect(),
        }
    }
}

/// Per-image line of `eval.csv`; errors in degrees.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub source: String,
    pub network: f64,
    pub method_used: &'static str,
    pub gray_world: f64,
    pub white_patch: f64,
    pub shades_of_gray: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: String,
    pub mean: f64,
    pub median: f64,
    pub trimean: f64,
    pub best25: f64,
    pub worst25: f64,
}

impl SummaryRow {
    pub fn new(method: impl Into<String>, s: &ErrorStats) -> Self {
        SummaryRow {
            method: method.into(),
            mean: s.mean,
            median: s.median,
            trimean: s.trimean,
            best25: s.best25,
            worst25: s.worst25,
        }
    }
}

/// Fixed-width table with two decimals.
pub fn write_table(out: &mut dyn Write, rows: &[SummaryRow]) -> std::io::Result<()> {
    let width = rows.iter().map(|r| r.method.len()).max().unwrap_or(0).max(6);
    writeln!(
        out,
        "{:<width$}  {:>8} {:>8} {:>8} {:>8} {:>8}",
        "method", "mean", "median", "trimean", "best25", "worst25"
    )?;
    for r in rows {
        writeln!(
            out,
            "{:<width$}  {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
            r.method, r.mean, r.median, r.trimean, r.best25, r.worst25
        )?;
    }
    Ok(())
}

/// Per-patch line of the inspection scatter file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScatterRow {
    pub source: String,
    pub grid_index: usize,
    pub confidence: f64,
    pub angular_error: f64,
}
