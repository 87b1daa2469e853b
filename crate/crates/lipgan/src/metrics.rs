//! Per-iteration training metrics and their CSV encoding.
//!
//! The column set is fixed and versioned (`lipgan-metrics-v1`) so every
//! scenario writes the same schema; quantities a scenario does not produce
//! are written as empty cells. Floats use Rust's shortest round-trip
//! formatting, which makes a rerun with the same seed byte-identical.

use serde::Serialize;

/// Schema tag written as a comment above the CSV header.
pub const METRICS_SCHEMA: &str = "lipgan-metrics-v1";

/// One evaluation row emitted during training.
///
/// `wall_ms` is carried in memory for reporting but always serialized as
/// null: a timing column would break the byte-for-byte reproducibility of
/// `metrics.csv`, so wall-clock aggregates live in `summary.json` instead.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsRecord {
    pub iteration: u64,
    /// Critic objective on the training batch, before any penalty term.
    pub d_loss: f64,
    pub g_loss: Option<f64>,
    /// Mean critic value on the real evaluation cloud minus the fake one.
    pub dual_objective: Option<f64>,
    /// Sampled maximum gradient norm between the clouds.
    pub lipschitz_estimate: Option<f64>,
    /// Multiplier of the augmented penalty (maxal runs only).
    pub lambda: Option<f64>,
    /// Largest interpolate gradient norm seen by the regularizer this step.
    pub g_max: Option<f64>,
    /// Exact transport distance between the evaluation clouds.
    pub w1_oracle: Option<f64>,
    /// Smallest gradient/direction cosine over matched segments.
    pub align_min_cosine: Option<f64>,
    pub align_mean_cosine: Option<f64>,
    /// Largest relative residual of scaled critic gaps vs matched distances.
    pub gap_max_residual: Option<f64>,
    pub wall_ms: Option<f64>,
}

impl MetricsRecord {
    pub fn new(iteration: u64, d_loss: f64) -> MetricsRecord {
        MetricsRecord {
            iteration,
            d_loss,
            g_loss: None,
            dual_objective: None,
            lipschitz_estimate: None,
            lambda: None,
            g_max: None,
            w1_oracle: None,
            align_min_cosine: None,
            align_mean_cosine: None,
            gap_max_residual: None,
            wall_ms: None,
        }
    }

    /// Every populated field must be finite; absent values are legal.
    pub fn is_finite(&self) -> bool {
        let opt = |v: &Option<f64>| v.map_or(true, f64::is_finite);
        self.d_loss.is_finite()
            && opt(&self.g_loss)
            && opt(&self.dual_objective)
            && opt(&self.lipschitz_estimate)
            && opt(&self.lambda)
            && opt(&self.g_max)
            && opt(&self.w1_oracle)
            && opt(&self.align_min_cosine)
            && opt(&self.align_mean_cosine)
            && opt(&self.gap_max_residual)
    }
}

/// Column names, in the order [`csv_row`] writes them.
pub const CSV_COLUMNS: &[&str] = &[
    "variant",
    "iteration",
    "d_loss",
    "g_loss",
    "dual_objective",
    "lipschitz_estimate",
    "lambda",
    "g_max",
    "w1_oracle",
    "align_min_cosine",
    "align_mean_cosine",
    "gap_max_residual",
    "wall_ms",
];

/// The two-line file prologue: schema comment plus header row.
pub fn csv_prologue() -> String {
    format!("# schema: {METRICS_SCHEMA}\n{}\n", CSV_COLUMNS.join(","))
}

fn cell(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}

/// Encodes one record under a variant label. `wall_ms` is intentionally left
/// empty (see [`MetricsRecord`]).
pub fn csv_row(variant: &str, record: &MetricsRecord) -> String {
    debug_assert!(record.is_finite(), "metrics row holds a non-finite value");
    debug_assert!(!variant.contains(','), "variant labels must be comma-free");
    format!(
        "{variant},{},{},{},{},{},{},{},{},{},{},{},\n",
        record.iteration,
        record.d_loss,
        cell(record.g_loss),
        cell(record.dual_objective),
        cell(record.lipschitz_estimate),
        cell(record.lambda),
        cell(record.g_max),
        cell(record.w1_oracle),
        cell(record.align_min_cosine),
        cell(record.align_mean_cosine),
        cell(record.gap_max_residual),
    )
}

/// One parsed row of a metrics file (used by the offline report command and
/// by summary checks, which recompute pass/fail from the CSV alone).
#[derive(Debug, Clone)]
pub struct ParsedRow {
    pub variant: String,
    pub record: MetricsRecord,
}

/// Parses text previously produced by [`csv_prologue`] + [`csv_row`] calls.
pub fn parse_csv(text: &str) -> Result<Vec<ParsedRow>, String> {
    let mut rows = Vec::new();
    let mut saw_header = false;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !saw_header {
            let expected = CSV_COLUMNS.join(",");
            if line != expected {
                return Err(format!("line {}: unexpected header `{line}`", lineno + 1));
            }
            saw_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != CSV_COLUMNS.len() {
            return Err(format!(
                "line {}: expected {} fields, got {}",
                lineno + 1,
                CSV_COLUMNS.len(),
                fields.len()
            ));
        }
        let opt = |s: &str| -> Result<Option<f64>, String> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse::<f64>().map(Some).map_err(|_| format!("bad float `{s}`"))
            }
        };
        let req = |s: &str| -> Result<f64, String> {
            s.parse::<f64>().map_err(|_| format!("bad float `{s}`"))
        };
        let record = MetricsRecord {
            iteration: fields[1].parse().map_err(|_| format!("line {}: bad iteration", lineno + 1))?,
            d_loss: req(fields[2]).map_err(|e| format!("line {}: {e}", lineno + 1))?,
            g_loss: opt(fields[3]).map_err(|e| format!("line {}: {e}", lineno + 1))?,
            dual_objective: opt(fields[4]).map_err(|e| format!("line {}: {e}", lineno + 1))?,
            lipschitz_estimate: opt(fields[5]).map_err(|e| format!("line {}: {e}", lineno + 1))?,
            lambda: opt(fields[6]).map_err(|e| format!("line {}: {e}", lineno + 1))?,
            g_max: opt(fields[7]).map_err(|e| format!("line {}: {e}", lineno + 1))?,
            w1_oracle: opt(fields[8]).map_err(|e| format!("line {}: {e}", lineno + 1))?,
            align_min_cosine: opt(fields[9]).map_err(|e| format!("line {}: {e}", lineno + 1))?,
            align_mean_cosine: opt(fields[10]).map_err(|e| format!("line {}: {e}", lineno + 1))?,
            gap_max_residual: opt(fields[11]).map_err(|e| format!("line {}: {e}", lineno + 1))?,
            wall_ms: opt(fields[12]).map_err(|e| format!("line {}: {e}", lineno + 1))?,
        };
        rows.push(ParsedRow { variant: fields[0].to_string(), record });
    }
    if !saw_header {
        return Err("metrics file has no header row".into());
    }
    Ok(rows)
}
