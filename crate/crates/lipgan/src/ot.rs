//! Exact 1-Wasserstein distances between equal-size point clouds, and
//! diagnostics that compare a trained critic against the optimal transport
//! plan.
//!
//! The distance is the mean Euclidean length of a minimum-cost perfect
//! matching (uniform weights make the optimal coupling a permutation), found
//! by the Jonker–Volgenant shortest-augmenting-path algorithm in `O(n^3)`.
//! A critic that attains the dual optimum must have unit-norm gradients
//! pointing along matched segments and differences equal to matched
//! distances; [`alignment_report`] and [`matched_gap_report`] measure how
//! close a critic comes to that ideal.

use std::fmt;
use std::path::Path;

use crate::tape::{NodeId, Tape, TapeError};
use crate::tensor::{Tensor, TensorError};

/// Pairs whose endpoints are closer than this are excluded from alignment
/// checks (the matched direction is undefined on them).
pub const COINCIDENT_PAIR_EPSILON: f64 = 1e-12;

/// Gradients shorter than this are flagged degenerate: their direction
/// carries no information, so their cosine is reported as zero.
pub const DEGENERATE_GRADIENT_NORM: f64 = 1e-8;

/// Errors from transport computations and cloud file handling.
#[derive(Debug)]
pub enum OtError {
    /// The two clouds must have the same number of points.
    SizeMismatch { a: usize, b: usize },
    /// The two clouds must share one ambient dimension.
    DimMismatch { a: usize, b: usize },
    /// Clouds must be non-empty and points equally sized.
    BadCloud(TensorError),
    /// Every matched pair coincides, leaving nothing to align against.
    AllPairsCoincident,
    /// The Lipschitz estimate used for normalization must be positive.
    NonPositiveScale(f64),
    /// Critic evaluation failed on the tape.
    Tape(TapeError),
    /// Cloud file could not be read or written.
    Io(std::io::Error),
    /// Cloud file contents did not parse.
    Parse { line: usize, message: String },
}

impl fmt::Display for OtError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OtError::SizeMismatch { a, b } => {
                write!(f, "clouds must be equally sized, got {a} and {b} points")
            }
            OtError::DimMismatch { a, b } => {
                write!(f, "clouds must share a dimension, got {a} and {b}")
            }
            OtError::BadCloud(e) => write!(f, "invalid cloud: {e}"),
            OtError::AllPairsCoincident => {
                write!(f, "every matched pair coincides; alignment is undefined")
            }
            OtError::NonPositiveScale(k) => {
                write!(f, "normalizing scale must be positive, got {k}")
            }
            OtError::Tape(e) => write!(f, "tape error: {e}"),
            OtError::Io(e) => write!(f, "io error: {e}"),
            OtError::Parse { line, message } => write!(f, "cloud file line {line}: {message}"),
        }
    }
}

impl std::error::Error for OtError {}

impl From<TapeError> for OtError {
    fn from(e: TapeError) -> Self {
        OtError::Tape(e)
    }
}

impl From<TensorError> for OtError {
    fn from(e: TensorError) -> Self {
        OtError::BadCloud(e)
    }
}

impl From<std::io::Error> for OtError {
    fn from(e: std::io::Error) -> Self {
        OtError::Io(e)
    }
}

/// A finite set of points in a common ambient dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec<f64>>) -> Result<PointCloud, OtError> {
        let first = points.first().ok_or(OtError::BadCloud(TensorError::Empty))?;
        let dim = first.len();
        if dim == 0 {
            return Err(OtError::BadCloud(TensorError::ZeroDim { shape: vec![0] }));
        }
        for (i, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(OtError::BadCloud(TensorError::RaggedRows {
                    row: i,
                    expected: dim,
                    got: p.len(),
                }));
            }
        }
        Ok(PointCloud { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction guarantees at least one point
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i]
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    /// The cloud as an `[n, dim]` matrix, row per point.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_rows(&self.points).expect("cloud rows validated at construction")
    }

    // Cloud files are plain text: a `dim <d>` header, then one point per
    // line, space-separated. Blank lines and `#` comments are skipped.

    pub fn save(&self, path: &Path) -> Result<(), OtError> {
        let mut out = format!("dim {}\n", self.dim());
        for p in &self.points {
            let fields: Vec<String> = p.iter().map(|x| format!("{x}")).collect();
            out.push_str(&fields.join(" "));
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<PointCloud, OtError> {
        let text = std::fs::read_to_string(path)?;
        let mut dim: Option<usize> = None;
        let mut points = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = i + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match dim {
                None => {
                    let d = line
                        .strip_prefix("dim ")
                        .and_then(|s| s.trim().parse::<usize>().ok())
                        .ok_or_else(|| OtError::Parse {
                            line: lineno,
                            message: format!("expected `dim <d>` header, got `{line}`"),
                        })?;
                    if d == 0 {
                        return Err(OtError::Parse {
                            line: lineno,
                            message: "dimension must be positive".into(),
                        });
                    }
                    dim = Some(d);
                }
                Some(d) => {
                    let coords = line
                        .split_whitespace()
                        .map(|t| {
                            t.parse::<f64>().map_err(|_| OtError::Parse {
                                line: lineno,
                                message: format!("bad coordinate `{t}`"),
                            })
                        })
                        .collect::<Result<Vec<f64>, _>>()?;
                    if coords.len() != d {
                        return Err(OtError::Parse {
                            line: lineno,
                            message: format!("expected {d} coordinates, got {}", coords.len()),
                        });
                    }
                    points.push(coords);
                }
            }
        }
        PointCloud::new(points)
    }
}

/// An optimal matching between two equally sized clouds.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    /// `(source index, target index)` sorted by source index.
    pub pairs: Vec<(usize, usize)>,
    /// Mean Euclidean distance over the matched pairs (the 1-Wasserstein
    /// distance under uniform weights).
    pub cost: f64,
}

impl TransportPlan {
    /// Target matched to source `i`.
    pub fn target_of(&self, i: usize) -> usize {
        self.pairs[i].1
    }

    /// The same matching read in the opposite direction.
    pub fn inverted(&self) -> TransportPlan {
        let mut pairs: Vec<(usize, usize)> = self.pairs.iter().map(|&(s, t)| (t, s)).collect();
        pairs.sort_unstable();
        TransportPlan { pairs, cost: self.cost }
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Exact 1-Wasserstein distance between two equally sized clouds, together
/// with the optimal matching that attains it.
pub fn exact_w1(a: &PointCloud, b: &PointCloud) -> Result<(f64, TransportPlan), OtError> {
    if a.len() != b.len() {
        return Err(OtError::SizeMismatch { a: a.len(), b: b.len() });
    }
    if a.dim() != b.dim() {
        return Err(OtError::DimMismatch { a: a.dim(), b: b.dim() });
    }
    let n = a.len();
    let cost: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| euclidean(a.point(i), b.point(j))).collect())
        .collect();
    let assignment = min_cost_assignment(&cost);
    // Sum in source order so reruns and the brute-force oracle add the same
    // floats in the same order.
    let total: f64 = (0..n).map(|i| cost[i][assignment[i]]).sum();
    let mean = total / n as f64;
    let pairs = (0..n).map(|i| (i, assignment[i])).collect();
    Ok((mean, TransportPlan { pairs, cost: mean }))
}

/// Minimum-cost perfect matching on a square cost matrix via shortest
/// augmenting paths with potentials (Jonker–Volgenant). Returns, for each
/// row, its assigned column.
fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    // 1-based arrays; p[j] is the row matched to column j (0 = free).
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    assignment
}

/// Evaluates `critic` on an `[n, d]` batch, returning per-row outputs.
pub fn eval_batch<F>(critic: &F, batch: Tensor) -> Result<Vec<f64>, OtError>
where
    F: Fn(&Tape, NodeId) -> Result<NodeId, TapeError>,
{
    let tape = Tape::new();
    let x = tape.constant(batch);
    let out = critic(&tape, x)?;
    Ok(tape.value(out).data().to_vec())
}

/// Evaluates `critic` and its input gradients on an `[n, d]` batch.
pub fn eval_gradients<F>(critic: &F, batch: Tensor) -> Result<Vec<Vec<f64>>, OtError>
where
    F: Fn(&Tape, NodeId) -> Result<NodeId, TapeError>,
{
    let (n, d) = (batch.rows(), batch.cols());
    let tape = Tape::new();
    let x = tape.leaf(batch, true);
    let out = critic(&tape, x)?;
    let seed = tape.sum(out)?;
    let grad = tape.backward(seed, &[x])?.remove(0);
    Ok((0..n).map(|i| grad.data()[i * d..(i + 1) * d].to_vec()).collect())
}

/// Mean critic value over `a` minus mean critic value over `b` — the value a
/// dual feasible critic assigns to the pair of clouds.
pub fn dual_objective<F>(critic: F, a: &PointCloud, b: &PointCloud) -> Result<f64, OtError>
where
    F: Fn(&Tape, NodeId) -> Result<NodeId, TapeError>,
{
    if a.dim() != b.dim() {
        return Err(OtError::DimMismatch { a: a.dim(), b: b.dim() });
    }
    let fa = eval_batch(&critic, a.to_tensor())?;
    let fb = eval_batch(&critic, b.to_tensor())?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(mean(&fa) - mean(&fb))
}

/// Largest difference quotient `|f(a_i) - f(b_j)| / d(a_i, b_j)` over the
/// matched pairs of `plan`. Combined with a gradient-sample estimate this
/// gives a Lipschitz lower bound that provably dominates
/// `dual_objective / w1`, so weak-duality checks normalized by it cannot
/// false-positive.
pub fn matched_quotient_bound<F>(
    critic: F,
    plan: &TransportPlan,
    a: &PointCloud,
    b: &PointCloud,
) -> Result<f64, OtError>
where
    F: Fn(&Tape, NodeId) -> Result<NodeId, TapeError>,
{
    let fa = eval_batch(&critic, a.to_tensor())?;
    let fb = eval_batch(&critic, b.to_tensor())?;
    let mut bound: f64 = 0.0;
    for &(i, j) in &plan.pairs {
        let d = euclidean(a.point(i), b.point(j));
        if d > COINCIDENT_PAIR_EPSILON {
            bound = bound.max((fa[i] - fb[j]).abs() / d);
        }
    }
    Ok(bound)
}

/// Alignment of one matched pair's gradients with its transport direction.
#[derive(Debug, Clone)]
pub struct PairAlignment {
    pub source: usize,
    pub target: usize,
    /// Distance between the matched endpoints.
    pub distance: f64,
    /// Smallest cosine between critic gradient and matched direction over
    /// the evaluation grid.
    pub min_cosine: f64,
    pub mean_cosine: f64,
    /// Largest deviation of the gradient norm from 1 over the grid.
    pub max_norm_deviation: f64,
    /// Grid points whose gradient was too short to carry a direction.
    pub degenerate_points: usize,
}

/// Aggregate alignment between a critic's gradient field and a transport
/// plan, sampled along matched segments.
#[derive(Debug, Clone)]
pub struct AlignmentReport {
    pub pairs: Vec<PairAlignment>,
    pub min_cosine: f64,
    pub mean_cosine: f64,
    pub max_norm_deviation: f64,
    pub mean_norm_deviation: f64,
    pub degenerate_points: usize,
    /// Matched pairs skipped because their endpoints coincide.
    pub skipped_pairs: usize,
}

/// Measures how well the critic's gradients along each matched segment point
/// from the `a`-side endpoint toward its matched `b`-side endpoint.
///
/// For every pair `(a_i, b_j)` of `plan` and every `t` in `t_grid`, the
/// gradient is evaluated at `a_i + t (b_j - a_i)` and compared with the unit
/// vector `(b_j - a_i) / d`. Gradients shorter than
/// [`DEGENERATE_GRADIENT_NORM`] contribute cosine 0 and are counted in
/// `degenerate_points`. Pairs with coincident endpoints are skipped; if all
/// pairs coincide the report is undefined and an error is returned.
pub fn alignment_report<F>(
    critic: F,
    plan: &TransportPlan,
    a: &PointCloud,
    b: &PointCloud,
    t_grid: &[f64],
) -> Result<AlignmentReport, OtError>
where
    F: Fn(&Tape, NodeId) -> Result<NodeId, TapeError>,
{
    if a.dim() != b.dim() {
        return Err(OtError::DimMismatch { a: a.dim(), b: b.dim() });
    }
    let mut kept: Vec<(usize, usize, f64, Vec<f64>)> = Vec::new();
    let mut skipped = 0usize;
    for &(i, j) in &plan.pairs {
        let d = euclidean(a.point(i), b.point(j));
        if d <= COINCIDENT_PAIR_EPSILON {
            skipped += 1;
            continue;
        }
        let dir: Vec<f64> =
            a.point(i).iter().zip(b.point(j)).map(|(x, y)| (y - x) / d).collect();
        kept.push((i, j, d, dir));
    }
    if kept.is_empty() {
        return Err(OtError::AllPairsCoincident);
    }

    // One batched gradient evaluation over every (pair, t) sample.
    let mut rows = Vec::with_capacity(kept.len() * t_grid.len());
    for (i, j, _, _) in &kept {
        for &t in t_grid {
            let row: Vec<f64> = a
                .point(*i)
                .iter()
                .zip(b.point(*j))
                .map(|(x, y)| x + t * (y - x))
                .collect();
            rows.push(row);
        }
    }
    let grads = eval_gradients(&critic, Tensor::from_rows(&rows)?)?;

    let mut pairs = Vec::with_capacity(kept.len());
    let mut cos_sum = 0.0;
    let mut cos_min = f64::INFINITY;
    let mut dev_sum = 0.0;
    let mut dev_max: f64 = 0.0;
    let mut degenerate_total = 0usize;
    for (k, (i, j, d, dir)) in kept.iter().enumerate() {
        let mut pair_min = f64::INFINITY;
        let mut pair_sum = 0.0;
        let mut pair_dev: f64 = 0.0;
        let mut pair_degenerate = 0usize;
        for (s, _) in t_grid.iter().enumerate() {
            let g = &grads[k * t_grid.len() + s];
            let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            let cosine = if norm < DEGENERATE_GRADIENT_NORM {
                pair_degenerate += 1;
                0.0
            } else {
                g.iter().zip(dir).map(|(x, u)| x * u).sum::<f64>() / norm
            };
            pair_min = pair_min.min(cosine);
            pair_sum += cosine;
            pair_dev = pair_dev.max((norm - 1.0).abs());
            cos_sum += cosine;
            cos_min = cos_min.min(cosine);
            dev_sum += (norm - 1.0).abs();
            dev_max = dev_max.max((norm - 1.0).abs());
        }
        degenerate_total += pair_degenerate;
        pairs.push(PairAlignment {
            source: *i,
            target: *j,
            distance: *d,
            min_cosine: pair_min,
            mean_cosine: pair_sum / t_grid.len() as f64,
            max_norm_deviation: pair_dev,
            degenerate_points: pair_degenerate,
        });
    }
    let samples = (kept.len() * t_grid.len()) as f64;
    Ok(AlignmentReport {
        pairs,
        min_cosine: cos_min,
        mean_cosine: cos_sum / samples,
        max_norm_deviation: dev_max,
        mean_norm_deviation: dev_sum / samples,
        degenerate_points: degenerate_total,
        skipped_pairs: skipped,
    })
}

/// Residuals between scaled critic differences and matched distances.
#[derive(Debug, Clone)]
pub struct MatchedGapReport {
    /// Per matched pair: `|(f(a_i) - f(b_j)) / scale - d(a_i, b_j)|`.
    pub residuals: Vec<f64>,
    pub distances: Vec<f64>,
    pub max_residual: f64,
    /// Largest residual divided by its pair's distance (coincident pairs
    /// excluded).
    pub max_relative_residual: f64,
}

/// Checks that, after dividing by the critic's Lipschitz scale, the critic
/// difference across each matched pair recovers the pair's distance — the
/// equality a dual-optimal critic satisfies on the support of the optimal
/// plan. `scale` must be positive (pass a Lipschitz estimate).
pub fn matched_gap_report<F>(
    critic: F,
    plan: &TransportPlan,
    a: &PointCloud,
    b: &PointCloud,
    scale: f64,
) -> Result<MatchedGapReport, OtError>
where
    F: Fn(&Tape, NodeId) -> Result<NodeId, TapeError>,
{
    if !(scale > 0.0) {
        return Err(OtError::NonPositiveScale(scale));
    }
    if a.dim() != b.dim() {
        return Err(OtError::DimMismatch { a: a.dim(), b: b.dim() });
    }
    let fa = eval_batch(&critic, a.to_tensor())?;
    let fb = eval_batch(&critic, b.to_tensor())?;
    let mut residuals = Vec::with_capacity(plan.pairs.len());
    let mut distances = Vec::with_capacity(plan.pairs.len());
    let mut max_residual: f64 = 0.0;
    let mut max_relative: f64 = 0.0;
    for &(i, j) in &plan.pairs {
        let d = euclidean(a.point(i), b.point(j));
        let residual = ((fa[i] - fb[j]) / scale - d).abs();
        if d > COINCIDENT_PAIR_EPSILON {
            max_relative = max_relative.max(residual / d);
        }
        max_residual = max_residual.max(residual);
        residuals.push(residual);
        distances.push(d);
    }
    Ok(MatchedGapReport { residuals, distances, max_residual, max_relative_residual: max_relative })
}
