//! Config-driven experiment runner.
//!
//! A run is described by a versioned TOML file, executes one of six canned
//! scenarios, and leaves a self-contained artifact directory behind:
//! `metrics.csv` (the full per-iteration record), `summary.json` (final
//! aggregates plus a pass/fail verdict per requested check), a
//! `config.echo.json` provenance copy, model checkpoints, and — for 2-D
//! critics — a gradient-field table with an SVG rendering.
//!
//! Every check verdict is recomputed from `metrics.csv` alone, so `report`
//! can re-derive summaries offline from the artifacts.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gan::{
    fit_discriminator, standard_normal_matrix, stream, train_gan, DataSampler, FitResult,
    TrainConfig, TrainError,
};
use crate::metrics::{csv_prologue, csv_row, parse_csv, MetricsRecord, ParsedRow};
use crate::nn::{Mlp, NnError};
use crate::ot::{eval_gradients, OtError, PointCloud};
use crate::reg::RegKind;
use crate::tensor::Tensor;

/// Environment variable that overrides the artifact root from the spec.
pub const OUTPUT_ENV: &str = "LIPGAN_OUT";

/// Spec files this build understands.
pub const SPEC_VERSION: u32 = 1;

/// Steps in an increment-path export (including the starting point).
pub const INCREMENT_STEPS: usize = 32;

/// Paths extend to this multiple of the matched-pair distance.
pub const INCREMENT_REACH: f64 = 1.5;

// Check thresholds, pinned so summaries mean the same thing everywhere.
pub const ALIGNMENT_MIN_COSINE: f64 = 0.99;
pub const MATCHED_GAP_MAX_RESIDUAL: f64 = 0.05;
pub const PENALTY_DRIFT_TOLERANCE: f64 = 0.10;
pub const LAMBDA_MATCH_TOLERANCE: f64 = 0.05;
pub const WEAK_DUALITY_SLACK: f64 = 1e-6;

/// RNG stream reserved for scenario data generation.
const STREAM_DATA: u64 = 6;

/// The canned experiment layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    /// Fit a critic to two random real and two random fake 2-D points.
    #[serde(rename = "toy2d")]
    Toy2d,
    /// Fit a critic to ten 48-dimensional targets vs ten noise vectors and
    /// export gradient-increment paths.
    #[serde(rename = "toycloud")]
    ToyCloud,
    /// Full adversarial loop against a four-mode 2-D Gaussian mixture.
    #[serde(rename = "gan2d")]
    Gan2d,
    /// Repeat one fit across several penalty weights to trace where the
    /// effective Lipschitz constant settles.
    #[serde(rename = "kstar_sweep")]
    KstarSweep,
    /// Fit with the augmented multiplier and record its trajectory.
    #[serde(rename = "lambda_track")]
    LambdaTrack,
    /// Side-by-side fits with spectral normalization, the mean penalty, and
    /// the max penalty under a shared seed and architecture. Report-only.
    #[serde(rename = "sn_compare")]
    SnCompare,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Scenario::Toy2d => "toy2d",
            Scenario::ToyCloud => "toycloud",
            Scenario::Gan2d => "gan2d",
            Scenario::KstarSweep => "kstar_sweep",
            Scenario::LambdaTrack => "lambda_track",
            Scenario::SnCompare => "sn_compare",
        };
        write!(f, "{name}")
    }
}

/// Verifiable claims a run can be asked to certify.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CheckKind {
    /// Interpolate gradients point along matched directions (min cosine).
    #[serde(rename = "alignment")]
    Alignment,
    /// Critic gaps across matched pairs equal their distances (scaled).
    #[serde(rename = "matched_gap")]
    MatchedGap,
    /// Fitted Lipschitz estimate settles at `w1 / rho + 1`.
    #[serde(rename = "penalty_drift")]
    PenaltyDrift,
    /// Negated multiplier converges to the transport distance.
    #[serde(rename = "lambda_w1")]
    LambdaW1,
    /// Normalized dual objective never exceeds the transport distance.
    #[serde(rename = "weak_duality")]
    WeakDuality,
}

impl fmt::Display for CheckKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            CheckKind::Alignment => "alignment",
            CheckKind::MatchedGap => "matched_gap",
            CheckKind::PenaltyDrift => "penalty_drift",
            CheckKind::LambdaW1 => "lambda_w1",
            CheckKind::WeakDuality => "weak_duality",
        };
        write!(f, "{name}")
    }
}

fn default_output() -> String {
    "runs".to_string()
}

fn default_field_res() -> usize {
    17
}

/// One experiment, as parsed from a TOML file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub version: u32,
    pub name: String,
    pub scenario: Scenario,
    #[serde(default)]
    pub checks: Vec<CheckKind>,
    /// Artifact root; [`OUTPUT_ENV`] overrides it.
    #[serde(default = "default_output")]
    pub output: String,
    /// Mechanisms to compare (sn_compare only).
    #[serde(default)]
    pub methods: Vec<RegKind>,
    /// Penalty weights to sweep (kstar_sweep only; defaults to 1, 10, 100).
    #[serde(default)]
    pub rhos: Vec<f64>,
    /// Grid resolution per axis for gradient-field exports.
    #[serde(default = "default_field_res")]
    pub field_res: usize,
    #[serde(default)]
    pub train: TrainConfig,
}

/// Failures surfaced by the runner. `Parse` and `Invalid` mean the spec file
/// is unusable; `Train` means a run started and then diverged.
#[derive(Debug)]
pub enum ExperimentError {
    Parse { message: String },
    Invalid { message: String },
    Train { message: String },
    NotTwoDimensional { dim: usize },
    Io(std::io::Error),
    Nn(NnError),
    Ot(OtError),
    Artifact { message: String },
}

impl fmt::Display for ExperimentError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExperimentError::Parse { message } => write!(f, "{message}"),
            ExperimentError::Invalid { message } => write!(f, "{message}"),
            ExperimentError::Train { message } => write!(f, "{message}"),
            ExperimentError::NotTwoDimensional { dim } => {
                write!(f, "field export needs a 2-D input model, got dimension {dim}")
            }
            ExperimentError::Io(e) => write!(f, "io: {e}"),
            ExperimentError::Nn(e) => write!(f, "model: {e}"),
            ExperimentError::Ot(e) => write!(f, "transport: {e}"),
            ExperimentError::Artifact { message } => write!(f, "artifact: {message}"),
        }
    }
}

impl std::error::Error for ExperimentError {}

impl From<std::io::Error> for ExperimentError {
    fn from(e: std::io::Error) -> Self {
        ExperimentError::Io(e)
    }
}

impl From<NnError> for ExperimentError {
    fn from(e: NnError) -> Self {
        ExperimentError::Nn(e)
    }
}

impl From<OtError> for ExperimentError {
    fn from(e: OtError) -> Self {
        ExperimentError::Ot(e)
    }
}

fn invalid(message: impl Into<String>) -> ExperimentError {
    ExperimentError::Invalid { message: message.into() }
}

/// Parses a spec file and fills scenario defaults (sweep weights).
pub fn load_spec(path: &Path) -> Result<ExperimentSpec, ExperimentError> {
    let text = fs::read_to_string(path).map_err(|e| ExperimentError::Parse {
        message: format!("{}: {e}", path.display()),
    })?;
    parse_spec(&text)
}

/// Parses spec text; TOML errors keep their line/column context.
pub fn parse_spec(text: &str) -> Result<ExperimentSpec, ExperimentError> {
    let mut spec: ExperimentSpec =
        toml::from_str(text).map_err(|e| ExperimentError::Parse { message: e.to_string() })?;
    if spec.scenario == Scenario::KstarSweep && spec.rhos.is_empty() {
        spec.rhos = vec![1.0, 10.0, 100.0];
    }
    Ok(spec)
}

/// Rejects specs that would misreport: wrong version, impossible check
/// combinations, or scenario knobs on the wrong scenario.
pub fn validate_spec(spec: &ExperimentSpec) -> Result<(), ExperimentError> {
    if spec.version != SPEC_VERSION {
        return Err(invalid(format!(
            "unsupported spec version {}; this build reads version {SPEC_VERSION}",
            spec.version
        )));
    }
    if spec.name.is_empty()
        || !spec.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
    {
        return Err(invalid("name must be non-empty and use only letters, digits, `-`, `_`"));
    }
    if spec.field_res == 0 {
        return Err(invalid("field_res must be at least 1"));
    }
    spec.train.validate().map_err(|e| invalid(format!("train: {e}")))?;

    if spec.scenario == Scenario::KstarSweep {
        if spec.rhos.is_empty() {
            return Err(invalid("kstar_sweep needs at least one entry in rhos"));
        }
        if spec.rhos.iter().any(|r| !r.is_finite() || *r <= 0.0) {
            return Err(invalid("rhos must all be positive and finite"));
        }
    } else if !spec.rhos.is_empty() {
        return Err(invalid("rhos only applies to the kstar_sweep scenario"));
    }

    if spec.scenario == Scenario::SnCompare {
        let mut got: Vec<String> = spec.methods.iter().map(|m| m.to_string()).collect();
        got.sort();
        if got != ["gp", "maxgp", "sn"] {
            return Err(invalid(
                "sn_compare requires methods = [\"sn\", \"gp\", \"maxgp\"] (any order)",
            ));
        }
        if !spec.checks.is_empty() {
            return Err(invalid(
                "sn_compare is report-only; it asserts no thresholds, so remove checks",
            ));
        }
    } else if !spec.methods.is_empty() {
        return Err(invalid("methods only applies to the sn_compare scenario"));
    }

    for (i, check) in spec.checks.iter().enumerate() {
        if spec.checks[..i].contains(check) {
            return Err(invalid(format!("duplicate check `{check}`")));
        }
        match check {
            CheckKind::LambdaW1 => {
                if spec.train.regularizer.kind != RegKind::MaxAl
                    || spec.train.objective != crate::gan::ObjectiveKind::Wgan
                {
                    return Err(invalid(
                        "lambda_w1 requires regularizer kind `maxal` and objective `wgan`",
                    ));
                }
            }
            CheckKind::PenaltyDrift => {
                let kind = spec.train.regularizer.kind;
                if !matches!(kind, RegKind::Gp | RegKind::Lp | RegKind::MaxGp) {
                    return Err(invalid(
                        "penalty_drift requires a quadratic penalty (gp, lp, or maxgp)",
                    ));
                }
            }
            CheckKind::Alignment | CheckKind::MatchedGap => {
                if spec.scenario == Scenario::Gan2d {
                    return Err(invalid(format!(
                        "{check} needs fixed clouds and is not available for gan2d"
                    )));
                }
            }
            CheckKind::WeakDuality => {}
        }
    }
    Ok(())
}

/// Where this spec's artifacts go: `{root}/{name}-seed{seed}`, so the same
/// name with another seed never overwrites an earlier run.
pub fn output_dir(spec: &ExperimentSpec) -> PathBuf {
    let root = std::env::var(OUTPUT_ENV).unwrap_or_else(|_| spec.output.clone());
    PathBuf::from(root).join(format!("{}-seed{}", spec.name, spec.train.seed))
}

/// Four tight Gaussian modes at `(±0.5, ±0.5)`.
pub struct MixtureSampler {
    pub centers: Vec<Vec<f64>>,
    pub sigma: f64,
}

impl MixtureSampler {
    pub fn default_2d() -> MixtureSampler {
        MixtureSampler {
            centers: vec![
                vec![0.5, 0.5],
                vec![0.5, -0.5],
                vec![-0.5, 0.5],
                vec![-0.5, -0.5],
            ],
            sigma: 0.05,
        }
    }
}

impl DataSampler for MixtureSampler {
    fn dim(&self) -> usize {
        self.centers[0].len()
    }

    fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let d = self.dim();
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let c = &self.centers[rng.gen_range(0..self.centers.len())];
            let noise = standard_normal_matrix(1, d, rng);
            let row: Vec<f64> =
                c.iter().zip(noise.data()).map(|(m, z)| m + self.sigma * z).collect();
            rows.push(row);
        }
        Tensor::from_rows(&rows).expect("mixture rows share the center dimension")
    }
}

fn normal_cloud(n: usize, d: usize, rng: &mut ChaCha8Rng) -> PointCloud {
    let m = standard_normal_matrix(n, d, rng);
    let rows: Vec<Vec<f64>> = (0..n).map(|i| m.row(i).to_vec()).collect();
    PointCloud::new(rows).expect("generated rows form a valid cloud")
}

/// Axis-aligned box for field exports.
#[derive(Debug, Clone, Copy)]
pub struct FieldBox {
    pub x_lo: f64,
    pub x_hi: f64,
    pub y_lo: f64,
    pub y_hi: f64,
}

/// One grid sample of the critic's input gradient.
#[derive(Debug, Clone)]
pub struct FieldRow {
    pub x1: f64,
    pub x2: f64,
    pub df_dx1: f64,
    pub df_dx2: f64,
    pub grad_norm: f64,
}

fn axis(lo: f64, hi: f64, res: usize) -> Vec<f64> {
    if res == 1 {
        return vec![(lo + hi) / 2.0];
    }
    (0..res).map(|i| lo + (hi - lo) * i as f64 / (res - 1) as f64).collect()
}

/// Samples the critic's input gradient on a `res × res` grid. The model must
/// take 2-D inputs.
pub fn gradient_field(
    model: &Mlp,
    bbox: &FieldBox,
    res: usize,
) -> Result<Vec<FieldRow>, ExperimentError> {
    if model.input_dim() != 2 {
        return Err(ExperimentError::NotTwoDimensional { dim: model.input_dim() });
    }
    if res == 0 {
        return Err(invalid("field resolution must be at least 1"));
    }
    if !(bbox.x_lo < bbox.x_hi) || !(bbox.y_lo < bbox.y_hi) {
        return Err(invalid("field box must have positive extent on both axes"));
    }
    let xs = axis(bbox.x_lo, bbox.x_hi, res);
    let ys = axis(bbox.y_lo, bbox.y_hi, res);
    let mut points = Vec::with_capacity(res * res);
    for y in &ys {
        for x in &xs {
            points.push(vec![*x, *y]);
        }
    }
    let batch = Tensor::from_rows(&points).expect("grid rows are 2-D");
    let grads = eval_gradients(&model.as_fn(), batch)?;
    Ok(points
        .iter()
        .zip(grads)
        .map(|(p, g)| FieldRow {
            x1: p[0],
            x2: p[1],
            df_dx1: g[0],
            df_dx2: g[1],
            grad_norm: (g[0] * g[0] + g[1] * g[1]).sqrt(),
        })
        .collect())
}

/// CSV table for a sampled gradient field.
pub fn field_csv(rows: &[FieldRow]) -> String {
    let mut out = String::from("x1,x2,df_dx1,df_dx2,grad_norm\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.x1, r.x2, r.df_dx1, r.df_dx2, r.grad_norm
        ));
    }
    out
}

/// Minimal arrow plot of a gradient field. The CSV is the contract; this is
/// a convenience rendering.
pub fn field_svg(rows: &[FieldRow], bbox: &FieldBox, res: usize) -> String {
    const SIZE: f64 = 640.0;
    let sx = |x: f64| (x - bbox.x_lo) / (bbox.x_hi - bbox.x_lo) * SIZE;
    let sy = |y: f64| SIZE - (y - bbox.y_lo) / (bbox.y_hi - bbox.y_lo) * SIZE;
    let max_norm = rows.iter().map(|r| r.grad_norm).fold(0.0, f64::max);
    let cell = SIZE / res.max(1) as f64;
    let scale = if max_norm > 0.0 { 0.45 * cell / max_norm } else { 0.0 };
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {SIZE} {SIZE}\">\n\
         <defs><marker id=\"tip\" markerWidth=\"6\" markerHeight=\"6\" refX=\"5\" refY=\"3\" \
         orient=\"auto\"><path d=\"M0,0 L6,3 L0,6 z\"/></marker></defs>\n\
         <rect width=\"{SIZE}\" height=\"{SIZE}\" fill=\"white\"/>\n"
    );
    for r in rows {
        if r.grad_norm <= 0.0 {
            continue;
        }
        let (x1, y1) = (sx(r.x1), sy(r.x2));
        let (x2, y2) = (x1 + r.df_dx1 * scale, y1 - r.df_dx2 * scale);
        svg.push_str(&format!(
            "<line x1=\"{x1:.2}\" y1=\"{y1:.2}\" x2=\"{x2:.2}\" y2=\"{y2:.2}\" \
             stroke=\"black\" stroke-width=\"1\" marker-end=\"url(#tip)\"/>\n"
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// One position along a gradient-increment path.
#[derive(Debug, Clone)]
pub struct PathStep {
    pub epsilon: f64,
    pub point: Vec<f64>,
    /// Euclidean distance to each real point, in cloud order.
    pub distances: Vec<f64>,
}

/// The ray `x + ε · ∇f(x)` from one fake point, sampled on an ε grid that
/// reaches [`INCREMENT_REACH`] times the matched-pair distance.
#[derive(Debug, Clone)]
pub struct IncrementPath {
    pub fake_index: usize,
    pub matched_real: usize,
    /// Set when the gradient at the start is numerically zero; the path then
    /// degenerates to the starting point.
    pub degenerate: bool,
    pub steps: Vec<PathStep>,
    /// Real point closest to any position on the path (ties resolve to the
    /// earliest step, then the lowest index).
    pub nearest_real: usize,
    pub nearest_distance: f64,
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Walks from `fake[fake_index]` along the critic gradient evaluated there.
pub fn increment_path<F>(
    critic: F,
    fake: &PointCloud,
    fake_index: usize,
    real: &PointCloud,
    matched_real: usize,
    n_steps: usize,
) -> Result<IncrementPath, ExperimentError>
where
    F: Fn(&crate::tape::Tape, crate::tape::NodeId) -> Result<crate::tape::NodeId, crate::tape::TapeError>,
{
    if n_steps < 2 {
        return Err(invalid("increment paths need at least two steps"));
    }
    if fake_index >= fake.len() || matched_real >= real.len() {
        return Err(invalid("path indices out of range for the given clouds"));
    }
    let x = fake.point(fake_index);
    let batch = Tensor::matrix(1, fake.dim(), x.to_vec()).expect("single-row batch");
    let grad = eval_gradients(&critic, batch)?.remove(0);
    let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    let degenerate = grad_norm <= crate::ot::DEGENERATE_GRADIENT_NORM;
    let reach = INCREMENT_REACH * euclidean(x, real.point(matched_real));

    let mut steps = Vec::with_capacity(n_steps);
    let mut nearest_real = 0;
    let mut nearest_distance = f64::INFINITY;
    for i in 0..n_steps {
        let epsilon = reach * i as f64 / (n_steps - 1) as f64;
        let point: Vec<f64> = x.iter().zip(&grad).map(|(xi, gi)| xi + epsilon * gi).collect();
        let distances: Vec<f64> =
            (0..real.len()).map(|j| euclidean(&point, real.point(j))).collect();
        for (j, d) in distances.iter().enumerate() {
            if *d < nearest_distance {
                nearest_distance = *d;
                nearest_real = j;
            }
        }
        steps.push(PathStep { epsilon, point, distances });
    }
    Ok(IncrementPath {
        fake_index,
        matched_real,
        degenerate,
        steps,
        nearest_real,
        nearest_distance,
    })
}

/// CSV table for a batch of increment paths.
pub fn paths_csv(paths: &[IncrementPath], dim: usize, n_real: usize) -> String {
    let mut header = String::from("fake_index,epsilon");
    for i in 0..dim {
        header.push_str(&format!(",x{i}"));
    }
    for j in 0..n_real {
        header.push_str(&format!(",dist_real_{j}"));
    }
    header.push('\n');
    let mut out = header;
    for path in paths {
        for step in &path.steps {
            out.push_str(&format!("{},{}", path.fake_index, step.epsilon));
            for v in &step.point {
                out.push_str(&format!(",{v}"));
            }
            for d in &step.distances {
                out.push_str(&format!(",{d}"));
            }
            out.push('\n');
        }
    }
    out
}

/// Verdict for one requested check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    pub pass: bool,
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

/// Final aggregates of one variant, all derived from its metrics rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantSummary {
    pub iterations: u64,
    pub final_d_loss: f64,
    pub first_w1: Option<f64>,
    pub w1_oracle: Option<f64>,
    pub final_dual: Option<f64>,
    pub final_lipschitz: Option<f64>,
    pub final_lambda: Option<f64>,
    pub final_g_max: Option<f64>,
    pub final_min_cosine: Option<f64>,
    pub final_mean_cosine: Option<f64>,
    pub final_gap_residual: Option<f64>,
}

/// Per-fake outcome of an increment-path export.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathOutcome {
    pub fake_index: usize,
    pub matched_real: usize,
    pub nearest_real: usize,
    /// Whether the nearest real point over the whole path is the matched one.
    pub hit: bool,
    pub nearest_distance: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathsSummary {
    pub hits: usize,
    pub total: usize,
    pub per_fake: Vec<PathOutcome>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RuntimeSummary {
    pub total_ms: u64,
    pub per_variant_ms: BTreeMap<String, u64>,
}

/// `summary.json` contents. Check verdicts are pure functions of
/// `metrics.csv`; timings live only here so the CSV stays byte-stable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema: String,
    pub name: String,
    pub scenario: Scenario,
    pub seed: u64,
    pub variants: BTreeMap<String, VariantSummary>,
    pub checks: BTreeMap<String, CheckResult>,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub paths: Option<PathsSummary>,
    pub runtime: RuntimeSummary,
}

pub const SUMMARY_SCHEMA: &str = "lipgan-summary-v1";

fn group_rows(rows: &[ParsedRow]) -> BTreeMap<String, Vec<&MetricsRecord>> {
    let mut groups: BTreeMap<String, Vec<&MetricsRecord>> = BTreeMap::new();
    for row in rows {
        groups.entry(row.variant.clone()).or_default().push(&row.record);
    }
    groups
}

fn last_some<T, F>(rows: &[&MetricsRecord], f: F) -> Option<T>
where
    F: Fn(&MetricsRecord) -> Option<T>,
{
    rows.iter().rev().find_map(|r| f(r))
}

fn first_some<T, F>(rows: &[&MetricsRecord], f: F) -> Option<T>
where
    F: Fn(&MetricsRecord) -> Option<T>,
{
    rows.iter().find_map(|r| f(r))
}

/// Reduces one variant's rows to its summary block.
pub fn summarize_variant(rows: &[&MetricsRecord]) -> VariantSummary {
    VariantSummary {
        iterations: rows.len() as u64,
        final_d_loss: rows.last().map(|r| r.d_loss).unwrap_or(f64::NAN),
        first_w1: first_some(rows, |r| r.w1_oracle),
        w1_oracle: last_some(rows, |r| r.w1_oracle),
        final_dual: last_some(rows, |r| r.dual_objective),
        final_lipschitz: last_some(rows, |r| r.lipschitz_estimate),
        final_lambda: last_some(rows, |r| r.lambda),
        final_g_max: last_some(rows, |r| r.g_max),
        final_min_cosine: last_some(rows, |r| r.align_min_cosine),
        final_mean_cosine: last_some(rows, |r| r.align_mean_cosine),
        final_gap_residual: last_some(rows, |r| r.gap_max_residual),
    }
}

fn fail(value: f64, threshold: f64, detail: String) -> CheckResult {
    CheckResult { pass: false, value, threshold, detail }
}

fn verdict(value: f64, threshold: f64, pass: bool, detail: String) -> CheckResult {
    CheckResult { pass, value, threshold, detail }
}

fn evaluate_one(
    check: CheckKind,
    spec: &ExperimentSpec,
    groups: &BTreeMap<String, Vec<&MetricsRecord>>,
) -> CheckResult {
    match check {
        CheckKind::Alignment => {
            let mut min: Option<(f64, &str)> = None;
            for (label, rows) in groups {
                match last_some(rows, |r| r.align_min_cosine) {
                    Some(v) => {
                        if min.map_or(true, |(m, _)| v < m) {
                            min = Some((v, label));
                        }
                    }
                    None => {
                        return fail(
                            f64::NAN,
                            ALIGNMENT_MIN_COSINE,
                            format!("variant {label} recorded no alignment rows"),
                        )
                    }
                }
            }
            match min {
                Some((v, label)) => verdict(
                    v,
                    ALIGNMENT_MIN_COSINE,
                    v >= ALIGNMENT_MIN_COSINE,
                    format!("worst matched-pair cosine {v:.4} (variant {label})"),
                ),
                None => fail(f64::NAN, ALIGNMENT_MIN_COSINE, "no metrics rows".into()),
            }
        }
        CheckKind::MatchedGap => {
            let mut max: Option<(f64, &str)> = None;
            for (label, rows) in groups {
                match last_some(rows, |r| r.gap_max_residual) {
                    Some(v) => {
                        if max.map_or(true, |(m, _)| v > m) {
                            max = Some((v, label));
                        }
                    }
                    None => {
                        return fail(
                            f64::NAN,
                            MATCHED_GAP_MAX_RESIDUAL,
                            format!("variant {label} recorded no gap rows"),
                        )
                    }
                }
            }
            match max {
                Some((v, label)) => verdict(
                    v,
                    MATCHED_GAP_MAX_RESIDUAL,
                    v <= MATCHED_GAP_MAX_RESIDUAL,
                    format!("worst matched-pair residual {v:.4} (variant {label})"),
                ),
                None => fail(f64::NAN, MATCHED_GAP_MAX_RESIDUAL, "no metrics rows".into()),
            }
        }
        CheckKind::PenaltyDrift => {
            let mut worst: Option<(f64, String)> = None;
            for (label, rows) in groups {
                let rho = label
                    .strip_prefix("rho")
                    .and_then(|s| s.parse::<f64>().ok())
                    .unwrap_or(spec.train.regularizer.rho);
                let (Some(w1), Some(k)) =
                    (last_some(rows, |r| r.w1_oracle), last_some(rows, |r| r.lipschitz_estimate))
                else {
                    return fail(
                        f64::NAN,
                        PENALTY_DRIFT_TOLERANCE,
                        format!("variant {label} lacks oracle or estimate rows"),
                    );
                };
                let predicted = w1 / rho + 1.0;
                let rel = (k - predicted).abs() / predicted;
                let detail = format!(
                    "variant {label}: estimate {k:.4} vs predicted {predicted:.4} (rel {rel:.4})"
                );
                if worst.as_ref().map_or(true, |(m, _)| rel > *m) {
                    worst = Some((rel, detail));
                }
            }
            match worst {
                Some((rel, detail)) => {
                    verdict(rel, PENALTY_DRIFT_TOLERANCE, rel <= PENALTY_DRIFT_TOLERANCE, detail)
                }
                None => fail(f64::NAN, PENALTY_DRIFT_TOLERANCE, "no metrics rows".into()),
            }
        }
        CheckKind::LambdaW1 => {
            let mut worst: Option<(f64, String)> = None;
            for (label, rows) in groups {
                let Some(lambda) = last_some(rows, |r| r.lambda) else { continue };
                let Some(w1) = last_some(rows, |r| r.w1_oracle) else { continue };
                if w1 <= 0.0 {
                    return fail(
                        f64::NAN,
                        LAMBDA_MATCH_TOLERANCE,
                        "transport distance is zero; ratio undefined".into(),
                    );
                }
                // The ascent update drives the multiplier to the negated
                // transport distance, so the comparison negates it.
                let rel = ((-lambda) - w1).abs() / w1;
                let detail = format!(
                    "variant {label}: -lambda {:.4} vs transport {w1:.4} (rel {rel:.4})",
                    -lambda
                );
                if worst.as_ref().map_or(true, |(m, _)| rel > *m) {
                    worst = Some((rel, detail));
                }
            }
            match worst {
                Some((rel, detail)) => {
                    verdict(rel, LAMBDA_MATCH_TOLERANCE, rel <= LAMBDA_MATCH_TOLERANCE, detail)
                }
                None => fail(
                    f64::NAN,
                    LAMBDA_MATCH_TOLERANCE,
                    "no rows carry a multiplier value".into(),
                ),
            }
        }
        CheckKind::WeakDuality => {
            let mut max_slack = f64::NEG_INFINITY;
            let mut rows_seen = 0usize;
            for rows in groups.values() {
                for r in rows {
                    if let (Some(dual), Some(k), Some(w1)) =
                        (r.dual_objective, r.lipschitz_estimate, r.w1_oracle)
                    {
                        rows_seen += 1;
                        let slack = dual / k.max(1e-12) - w1;
                        if slack > max_slack {
                            max_slack = slack;
                        }
                    }
                }
            }
            if rows_seen == 0 {
                return fail(
                    f64::NAN,
                    WEAK_DUALITY_SLACK,
                    "no rows carry dual, estimate, and oracle together".into(),
                );
            }
            verdict(
                max_slack,
                WEAK_DUALITY_SLACK,
                max_slack <= WEAK_DUALITY_SLACK,
                format!("max normalized dual excess {max_slack:.3e} over {rows_seen} rows"),
            )
        }
    }
}

/// Evaluates every requested check against parsed metrics rows. This is the
/// single implementation used both when writing `summary.json` and when
/// re-deriving it offline.
pub fn evaluate_checks(
    spec: &ExperimentSpec,
    rows: &[ParsedRow],
) -> BTreeMap<String, CheckResult> {
    let groups = group_rows(rows);
    spec.checks
        .iter()
        .map(|c| (c.to_string(), evaluate_one(*c, spec, &groups)))
        .collect()
}

struct ScenarioArtifacts {
    rows: Vec<(String, Vec<MetricsRecord>)>,
    per_variant_ms: BTreeMap<String, u64>,
    paths: Option<PathsSummary>,
}

impl ScenarioArtifacts {
    fn new() -> ScenarioArtifacts {
        ScenarioArtifacts { rows: Vec::new(), per_variant_ms: BTreeMap::new(), paths: None }
    }
}

fn train_failure(e: TrainError, acc: &mut ScenarioArtifacts, label: &str) -> ExperimentError {
    let message = e.to_string();
    match e {
        TrainError::Diverged { metrics, .. } | TrainError::NonFinite { metrics, .. } => {
            acc.rows.push((label.to_string(), metrics));
            ExperimentError::Train { message }
        }
        other => ExperimentError::Train { message: other.to_string() },
    }
}

fn fit_variant(
    label: &str,
    real: &PointCloud,
    fake: &PointCloud,
    config: &TrainConfig,
    acc: &mut ScenarioArtifacts,
) -> Result<FitResult, ExperimentError> {
    let started = Instant::now();
    let result = fit_discriminator(real, fake, config);
    let elapsed = started.elapsed().as_millis() as u64;
    acc.per_variant_ms.insert(label.to_string(), elapsed);
    match result {
        Ok(fit) => {
            acc.rows.push((label.to_string(), fit.metrics.clone()));
            Ok(fit)
        }
        Err(e) => Err(train_failure(e, acc, label)),
    }
}

/// Box around a set of 2-D clouds with a proportional margin.
fn bbox_around(clouds: &[&PointCloud]) -> FieldBox {
    let mut x = (f64::INFINITY, f64::NEG_INFINITY);
    let mut y = (f64::INFINITY, f64::NEG_INFINITY);
    for cloud in clouds {
        for p in cloud.points() {
            x = (x.0.min(p[0]), x.1.max(p[0]));
            y = (y.0.min(p[1]), y.1.max(p[1]));
        }
    }
    let pad = 0.25 * (x.1 - x.0).max(y.1 - y.0).max(0.5);
    FieldBox { x_lo: x.0 - pad, x_hi: x.1 + pad, y_lo: y.0 - pad, y_hi: y.1 + pad }
}

fn write_field(
    model: &Mlp,
    clouds: &[&PointCloud],
    res: usize,
    dir: &Path,
    basename: &str,
) -> Result<(), ExperimentError> {
    let bbox = bbox_around(clouds);
    let rows = gradient_field(model, &bbox, res)?;
    fs::write(dir.join(format!("{basename}.csv")), field_csv(&rows))?;
    fs::write(dir.join(format!("{basename}.svg")), field_svg(&rows, &bbox, res))?;
    Ok(())
}

fn summarize_paths(paths: &[IncrementPath]) -> PathsSummary {
    let per_fake: Vec<PathOutcome> = paths
        .iter()
        .map(|p| PathOutcome {
            fake_index: p.fake_index,
            matched_real: p.matched_real,
            nearest_real: p.nearest_real,
            hit: p.nearest_real == p.matched_real,
            nearest_distance: p.nearest_distance,
            degenerate: p.degenerate,
        })
        .collect();
    PathsSummary {
        hits: per_fake.iter().filter(|o| o.hit).count(),
        total: per_fake.len(),
        per_fake,
    }
}

fn execute_scenario(
    spec: &ExperimentSpec,
    dir: &Path,
    acc: &mut ScenarioArtifacts,
) -> Result<(), ExperimentError> {
    let mut rng = stream(spec.train.seed, STREAM_DATA);
    match spec.scenario {
        Scenario::Toy2d | Scenario::LambdaTrack => {
            let real = normal_cloud(2, 2, &mut rng);
            let fake = normal_cloud(2, 2, &mut rng);
            let label = spec.train.regularizer.kind.to_string();
            let fit = fit_variant(&label, &real, &fake, &spec.train, acc)?;
            fit.model.save(&dir.join("critic.txt"))?;
            write_field(&fit.model, &[&real, &fake], spec.field_res, dir, "field")?;
        }
        Scenario::ToyCloud => {
            let real = normal_cloud(10, 48, &mut rng);
            let fake = normal_cloud(10, 48, &mut rng);
            let label = spec.train.regularizer.kind.to_string();
            let fit = fit_variant(&label, &real, &fake, &spec.train, acc)?;
            fit.model.save(&dir.join("critic.txt"))?;
            let from_fake = fit.plan.inverted();
            let mut paths = Vec::with_capacity(fake.len());
            for j in 0..fake.len() {
                paths.push(increment_path(
                    fit.model.as_fn(),
                    &fake,
                    j,
                    &real,
                    from_fake.target_of(j),
                    INCREMENT_STEPS,
                )?);
            }
            fs::write(dir.join("paths.csv"), paths_csv(&paths, fake.dim(), real.len()))?;
            acc.paths = Some(summarize_paths(&paths));
        }
        Scenario::KstarSweep => {
            let real = PointCloud::new(vec![vec![2.0]]).expect("fixed cloud");
            let fake = PointCloud::new(vec![vec![0.0]]).expect("fixed cloud");
            for rho in &spec.rhos {
                let mut config = spec.train.clone();
                config.regularizer.rho = *rho;
                let label = format!("rho{rho}");
                let fit = fit_variant(&label, &real, &fake, &config, acc)?;
                fit.model.save(&dir.join(format!("critic-{label}.txt")))?;
            }
        }
        Scenario::SnCompare => {
            let real = normal_cloud(2, 2, &mut rng);
            let fake = normal_cloud(2, 2, &mut rng);
            for kind in &spec.methods {
                let mut config = spec.train.clone();
                config.regularizer.kind = *kind;
                let label = kind.to_string();
                let fit = fit_variant(&label, &real, &fake, &config, acc)?;
                fit.model.save(&dir.join(format!("critic-{label}.txt")))?;
                write_field(
                    &fit.model,
                    &[&real, &fake],
                    spec.field_res,
                    dir,
                    &format!("field-{label}"),
                )?;
            }
        }
        Scenario::Gan2d => {
            let sampler = MixtureSampler::default_2d();
            let label = spec.train.regularizer.kind.to_string();
            let started = Instant::now();
            let result = train_gan(&spec.train, &sampler);
            acc.per_variant_ms
                .insert(label.clone(), started.elapsed().as_millis() as u64);
            match result {
                Ok(outcome) => {
                    acc.rows.push((label.clone(), outcome.metrics.clone()));
                    outcome.generator.save(&dir.join("generator.txt"))?;
                    outcome.discriminator.save(&dir.join("critic.txt"))?;
                    let box_cloud =
                        PointCloud::new(vec![vec![-1.0, -1.0], vec![1.0, 1.0]]).expect("box");
                    write_field(
                        &outcome.discriminator,
                        &[&box_cloud],
                        spec.field_res,
                        dir,
                        "field",
                    )?;
                }
                Err(e) => return Err(train_failure(e, acc, &label)),
            }
        }
    }
    Ok(())
}

/// What [`run_experiment`] hands back on success.
pub struct RunOutcome {
    pub dir: PathBuf,
    pub summary: RunSummary,
    /// True when every requested check passed.
    pub pass: bool,
}

/// Executes a spec and writes its artifact directory. On divergence the
/// partial metrics are still written before the error is returned.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<RunOutcome, ExperimentError> {
    validate_spec(spec)?;
    let dir = output_dir(spec);
    fs::create_dir_all(&dir)?;
    let echo = serde_json::to_string_pretty(spec)
        .map_err(|e| ExperimentError::Artifact { message: e.to_string() })?;
    fs::write(dir.join("config.echo.json"), echo + "\n")?;

    let started = Instant::now();
    let mut acc = ScenarioArtifacts::new();
    let result = execute_scenario(spec, &dir, &mut acc);

    let mut csv = csv_prologue();
    for (label, rows) in &acc.rows {
        for record in rows {
            csv.push_str(&csv_row(label, record));
        }
    }
    fs::write(dir.join("metrics.csv"), &csv)?;
    result?;

    let parsed = parse_csv(&csv)
        .map_err(|m| ExperimentError::Artifact { message: format!("metrics round trip: {m}") })?;
    let groups = group_rows(&parsed);
    let variants: BTreeMap<String, VariantSummary> =
        groups.iter().map(|(label, rows)| (label.clone(), summarize_variant(rows))).collect();
    let checks = evaluate_checks(spec, &parsed);
    let pass = checks.values().all(|c| c.pass);
    let summary = RunSummary {
        schema: SUMMARY_SCHEMA.to_string(),
        name: spec.name.clone(),
        scenario: spec.scenario,
        seed: spec.train.seed,
        variants,
        checks,
        pass,
        paths: acc.paths,
        runtime: RuntimeSummary {
            total_ms: started.elapsed().as_millis() as u64,
            per_variant_ms: acc.per_variant_ms,
        },
    };
    let text = serde_json::to_string_pretty(&summary)
        .map_err(|e| ExperimentError::Artifact { message: e.to_string() })?;
    fs::write(dir.join("summary.json"), text + "\n")?;
    Ok(RunOutcome { dir, summary, pass })
}

/// Re-derives one CSV line per variant from each run directory, recomputing
/// check verdicts from `metrics.csv` rather than trusting `summary.json`.
pub fn aggregate_report(dirs: &[PathBuf]) -> Result<String, ExperimentError> {
    let mut out = String::from(
        "name,scenario,seed,variant,iterations,w1_oracle,final_dual,final_lipschitz,\
         final_min_cosine,final_gap_residual,final_lambda,checks_pass\n",
    );
    for dir in dirs {
        let echo = fs::read_to_string(dir.join("config.echo.json")).map_err(|e| {
            ExperimentError::Parse { message: format!("{}: {e}", dir.display()) }
        })?;
        let spec: ExperimentSpec = serde_json::from_str(&echo)
            .map_err(|e| ExperimentError::Parse { message: format!("{}: {e}", dir.display()) })?;
        let csv = fs::read_to_string(dir.join("metrics.csv")).map_err(|e| {
            ExperimentError::Parse { message: format!("{}: {e}", dir.display()) }
        })?;
        let rows = parse_csv(&csv)
            .map_err(|m| ExperimentError::Parse { message: format!("{}: {m}", dir.display()) })?;
        let checks = evaluate_checks(&spec, &rows);
        let pass = checks.values().all(|c| c.pass);
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for (label, group) in group_rows(&rows) {
            let s = summarize_variant(&group);
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                spec.name,
                spec.scenario,
                spec.train.seed,
                label,
                s.iterations,
                opt(s.w1_oracle),
                opt(s.final_dual),
                opt(s.final_lipschitz),
                opt(s.final_min_cosine),
                opt(s.final_gap_residual),
                opt(s.final_lambda),
                pass,
            ));
        }
    }
    Ok(out)
}
