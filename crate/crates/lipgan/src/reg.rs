//! Lipschitz regularizers for critic training.
//!
//! All terms are written as additions to the objective the critic
//! *maximizes*; a trainer that minimizes a loss subtracts them exactly once.
//! With norms `n_i` at sampled interpolation points, target slope `k`, and
//! penalty weight `rho`:
//!
//! * `gp`:     `-(rho/2) * mean((n_i - k)^2)` — two-sided pull toward `k`;
//! * `lp`:     `-(rho/2) * mean(max(0, n_i - k)^2)` — one-sided;
//! * `maxgp`:  `-(rho/2) * (max_i n_i - k)^2` — penalizes only the largest
//!   norm, optionally tracked across batches by a small point buffer;
//! * `maxal`:  `lambda * (g - k) - (rho/2) * (g - k)^2` with `g = max_i n_i`
//!   and the multiplier updated by `lambda -= rho * (g - k)` after each step.
//!
//! Because the penalties differentiate a gradient norm, their parameter
//! gradients need a differentiable backward pass; see [`crate::tape`].

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tape::{NodeId, Tape, TapeError};
use crate::tensor::{Tensor, TensorError};

/// Which Lipschitz-enforcement mechanism a training run uses. `None`, `Clip`
/// and `SpectralNorm` add no loss term (clipping and normalization act on the
/// weights directly); the remaining kinds are penalty terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegKind {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "clip")]
    Clip,
    #[serde(rename = "sn")]
    SpectralNorm,
    #[serde(rename = "gp")]
    Gp,
    #[serde(rename = "lp")]
    Lp,
    #[serde(rename = "maxgp")]
    MaxGp,
    #[serde(rename = "maxal")]
    MaxAl,
}

impl RegKind {
    pub fn is_penalty(self) -> bool {
        matches!(self, RegKind::Gp | RegKind::Lp | RegKind::MaxGp | RegKind::MaxAl)
    }
}

impl fmt::Display for RegKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            RegKind::None => "none",
            RegKind::Clip => "clip",
            RegKind::SpectralNorm => "sn",
            RegKind::Gp => "gp",
            RegKind::Lp => "lp",
            RegKind::MaxGp => "maxgp",
            RegKind::MaxAl => "maxal",
        };
        write!(f, "{name}")
    }
}

impl std::str::FromStr for RegKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(RegKind::None),
            "clip" => Ok(RegKind::Clip),
            "sn" => Ok(RegKind::SpectralNorm),
            "gp" => Ok(RegKind::Gp),
            "lp" => Ok(RegKind::Lp),
            "maxgp" => Ok(RegKind::MaxGp),
            "maxal" => Ok(RegKind::MaxAl),
            _ => Err(format!("unknown regularizer kind `{s}`")),
        }
    }
}

/// Declarative regularizer settings, as they appear in experiment configs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegConfig {
    pub kind: RegKind,
    /// Penalty weight.
    pub rho: f64,
    /// Target Lipschitz constant.
    pub target_k: f64,
    /// Points carried between batches by the max-tracking kinds (0 disables
    /// the buffer).
    pub buffer_capacity: usize,
    /// Clamp bound used when `kind = clip`.
    pub clip_bound: f64,
    /// Power iterations per step when `kind = sn`.
    pub sn_power_iters: usize,
}

impl Default for RegConfig {
    fn default() -> Self {
        RegConfig {
            kind: RegKind::None,
            rho: 10.0,
            target_k: 1.0,
            buffer_capacity: 0,
            clip_bound: 0.01,
            sn_power_iters: 1,
        }
    }
}

/// Errors from regularizer construction and evaluation.
#[derive(Debug)]
pub enum RegError {
    /// rho / target_k / clip bound out of range for the chosen kind.
    InvalidConfig(String),
    /// Real and fake batches disagree in shape.
    BatchMismatch { real: Vec<usize>, fake: Vec<usize> },
    /// A non-finite quantity reached the multiplier update.
    NonFinite(&'static str),
    /// The operation only applies to the `maxal` kind.
    WrongKind { expected: RegKind, got: RegKind },
    /// Underlying tape failure.
    Tape(TapeError),
    /// Underlying tensor construction failure.
    Tensor(TensorError),
}

impl fmt::Display for RegError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RegError::InvalidConfig(m) => write!(f, "{m}"),
            RegError::BatchMismatch { real, fake } => {
                write!(f, "real batch {real:?} and fake batch {fake:?} must match")
            }
            RegError::NonFinite(what) => write!(f, "{what} is not finite"),
            RegError::WrongKind { expected, got } => {
                write!(f, "operation requires kind {expected}, state has {got}")
            }
            RegError::Tape(e) => write!(f, "tape error: {e}"),
            RegError::Tensor(e) => write!(f, "tensor error: {e}"),
        }
    }
}

impl std::error::Error for RegError {}

impl From<TapeError> for RegError {
    fn from(e: TapeError) -> Self {
        RegError::Tape(e)
    }
}

impl From<TensorError> for RegError {
    fn from(e: TensorError) -> Self {
        RegError::Tensor(e)
    }
}

/// A point remembered by the max-tracking buffer, with the gradient norm it
/// had when recorded.
#[derive(Debug, Clone)]
pub struct BufferEntry {
    pub point: Vec<f64>,
    pub grad_norm: f64,
}

/// Mutable per-run regularizer state: the configuration plus the multiplier
/// and the high-gradient point buffer.
#[derive(Debug, Clone)]
pub struct RegularizerState {
    pub kind: RegKind,
    pub rho: f64,
    pub target_k: f64,
    /// Multiplier of the `maxal` kind; starts at zero.
    pub lambda: f64,
    /// Highest-gradient points seen so far, sorted by norm descending.
    pub buffer: Vec<BufferEntry>,
    pub buffer_capacity: usize,
    pub clip_bound: f64,
    pub sn_power_iters: usize,
}

impl RegularizerState {
    pub fn new(config: &RegConfig) -> Result<RegularizerState, RegError> {
        if config.kind.is_penalty() {
            if !(config.rho > 0.0) {
                return Err(RegError::InvalidConfig(format!(
                    "penalty weight must be positive, got {}",
                    config.rho
                )));
            }
            if !(config.target_k > 0.0) {
                return Err(RegError::InvalidConfig(format!(
                    "target Lipschitz constant must be positive, got {}",
                    config.target_k
                )));
            }
        }
        if config.kind == RegKind::Clip && !(config.clip_bound > 0.0) {
            return Err(RegError::InvalidConfig(format!(
                "clip bound must be positive, got {}",
                config.clip_bound
            )));
        }
        if config.kind == RegKind::SpectralNorm && config.sn_power_iters == 0 {
            return Err(RegError::InvalidConfig("sn_power_iters must be at least 1".into()));
        }
        Ok(RegularizerState {
            kind: config.kind,
            rho: config.rho,
            target_k: config.target_k,
            lambda: 0.0,
            buffer: Vec::new(),
            buffer_capacity: config.buffer_capacity,
            clip_bound: config.clip_bound,
            sn_power_iters: config.sn_power_iters,
        })
    }
}

/// Where an interpolated point came from: indices into the real and fake
/// batches and the mixing coefficient. The point is exactly
/// `t * real[real_index] + (1 - t) * fake[fake_index]`, so it can be
/// recomputed bit for bit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interpolation {
    pub real_index: usize,
    pub fake_index: usize,
    pub t: f64,
}

/// A batch of segment samples between paired real and fake points.
#[derive(Debug, Clone)]
pub struct InterpolationBatch {
    /// `[n, d]` matrix, one interpolated point per row.
    pub points: Tensor,
    pub provenance: Vec<Interpolation>,
}

/// Draws one uniform `t` per aligned row pair and mixes
/// `t * real + (1 - t) * fake`. `t = 1` would reproduce the real point,
/// `t = 0` the fake one.
pub fn sample_interpolations(
    real: &Tensor,
    fake: &Tensor,
    rng: &mut impl Rng,
) -> Result<InterpolationBatch, RegError> {
    if real.shape() != fake.shape() || real.rank() != 2 {
        return Err(RegError::BatchMismatch {
            real: real.shape().to_vec(),
            fake: fake.shape().to_vec(),
        });
    }
    let (n, d) = (real.rows(), real.cols());
    let mut provenance = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        let t: f64 = rng.gen();
        provenance.push(Interpolation { real_index: i, fake_index: i, t });
        for (r, f) in real.row(i).iter().zip(fake.row(i)) {
            data.push(t * r + (1.0 - t) * f);
        }
    }
    Ok(InterpolationBatch { points: Tensor::matrix(n, d, data)?, provenance })
}

/// Builds the `[n, 1]` gradient-norm node for `critic` at `points`, returning
/// it together with the input leaf.
fn grad_norms_node<F>(tape: &Tape, critic: &F, points: &Tensor) -> Result<NodeId, TapeError>
where
    F: Fn(&Tape, NodeId) -> Result<NodeId, TapeError>,
{
    let input = tape.leaf(points.clone(), true);
    let out = critic(tape, input)?;
    tape.grad_norm(out, input)
}

/// Mean squared deviation penalty: `-(rho/2) * mean((n_i - k)^2)`.
pub fn reg_gp<F>(
    tape: &Tape,
    critic: F,
    points: &Tensor,
    rho: f64,
    target_k: f64,
) -> Result<NodeId, RegError>
where
    F: Fn(&Tape, NodeId) -> Result<NodeId, TapeError>,
{
    let norms = grad_norms_node(tape, &critic, points)?;
    let k = tape.scalar(target_k);
    let resid = tape.sub(norms, k)?;
    let mean = tape.mean(tape.square(resid)?)?;
    Ok(tape.mul(mean, tape.scalar(-rho / 2.0))?)
}

/// One-sided variant of [`reg_gp`]: only norms above `k` are penalized.
pub fn reg_lp<F>(
    tape: &Tape,
    critic: F,
    points: &Tensor,
    rho: f64,
    target_k: f64,
) -> Result<NodeId, RegError>
where
    F: Fn(&Tape, NodeId) -> Result<NodeId, TapeError>,
{
    let norms = grad_norms_node(tape, &critic, points)?;
    let k = tape.scalar(target_k);
    let excess = tape.relu(tape.sub(norms, k)?)?;
    let mean = tape.mean(tape.square(excess)?)?;
    Ok(tape.mul(mean, tape.scalar(-rho / 2.0))?)
}

/// Shared plumbing for the max-tracking kinds: stacks the batch with the
/// buffered points, finds the (recorded) maximum gradient norm, and refreshes
/// the buffer with the highest-norm points under the *current* critic.
fn max_norm_parts<F>(
    tape: &Tape,
    critic: &F,
    points: &Tensor,
    state: &mut RegularizerState,
) -> Result<(NodeId, f64, Vec<f64>), RegError>
where
    F: Fn(&Tape, NodeId) -> Result<NodeId, TapeError>,
{
    let n = points.rows();
    let mut rows: Vec<Vec<f64>> = (0..n).map(|i| points.row(i).to_vec()).collect();
    for entry in &state.buffer {
        rows.push(entry.point.clone());
    }
    let stacked = Tensor::from_rows(&rows)?;
    let norms_node = grad_norms_node(tape, critic, &stacked)?;
    let norms = tape.value(norms_node).data().to_vec();
    let g_max = norms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let gmax_node = tape.max_reduce(norms_node)?;

    if state.buffer_capacity > 0 {
        let mut ranked: Vec<usize> = (0..rows.len()).collect();
        // Stable sort by descending current norm; ties keep batch order.
        ranked.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).expect("norms are finite"));
        state.buffer = ranked
            .into_iter()
            .take(state.buffer_capacity)
            .map(|i| BufferEntry { point: rows[i].clone(), grad_norm: norms[i] })
            .collect();
        debug_assert!(state.buffer.windows(2).all(|w| w[0].grad_norm >= w[1].grad_norm));
    }
    Ok((gmax_node, g_max, norms))
}

/// Max-only penalty: `-(rho/2) * (max_i n_i - k)^2`. Gradients flow through
/// the maximizing point alone; with a positive buffer capacity the maximum is
/// taken over the batch plus remembered high-gradient points.
pub fn reg_maxgp<F>(
    tape: &Tape,
    critic: F,
    points: &Tensor,
    state: &mut RegularizerState,
) -> Result<NodeId, RegError>
where
    F: Fn(&Tape, NodeId) -> Result<NodeId, TapeError>,
{
    let (gmax, _, _) = max_norm_parts(tape, &critic, points, state)?;
    let k = tape.scalar(state.target_k);
    let resid = tape.sub(gmax, k)?;
    let sq = tape.square(resid)?;
    Ok(tape.mul(sq, tape.scalar(-state.rho / 2.0))?)
}

/// Augmented multiplier term on the maximum norm:
/// `lambda * (g - k) - (rho/2) * (g - k)^2`. With `lambda = 0` this equals
/// [`reg_maxgp`] exactly. The multiplier itself is constant in the graph; it
/// changes only through [`update_lambda`].
pub fn reg_maxal<F>(
    tape: &Tape,
    critic: F,
    points: &Tensor,
    state: &mut RegularizerState,
) -> Result<NodeId, RegError>
where
    F: Fn(&Tape, NodeId) -> Result<NodeId, TapeError>,
{
    let (gmax, _, _) = max_norm_parts(tape, &critic, points, state)?;
    let k = tape.scalar(state.target_k);
    let resid = tape.sub(gmax, k)?;
    let linear = tape.mul(tape.scalar(state.lambda), resid)?;
    let quad = tape.mul(tape.square(resid)?, tape.scalar(state.rho / 2.0))?;
    Ok(tape.sub(linear, quad)?)
}

/// The regularizer's contribution to one training step.
pub struct RegOutcome {
    /// Penalty node to add to the maximized objective (`None` for the
    /// non-penalty kinds).
    pub term: Option<NodeId>,
    /// Largest gradient norm seen this step (batch plus buffer).
    pub g_max: f64,
    /// All gradient norms of the evaluated points.
    pub norms: Vec<f64>,
}

/// Evaluates whichever regularizer `state` configures on one interpolation
/// batch. Non-penalty kinds still measure gradient norms so that every
/// mechanism reports `g_max`.
pub fn apply_regularizer<F>(
    tape: &Tape,
    critic: F,
    points: &Tensor,
    state: &mut RegularizerState,
) -> Result<RegOutcome, RegError>
where
    F: Fn(&Tape, NodeId) -> Result<NodeId, TapeError>,
{
    match state.kind {
        RegKind::None | RegKind::Clip | RegKind::SpectralNorm => {
            let norms_node = grad_norms_node(tape, &critic, points)?;
            let norms = tape.value(norms_node).data().to_vec();
            let g_max = norms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            Ok(RegOutcome { term: None, g_max, norms })
        }
        RegKind::Gp => {
            let norms_node = grad_norms_node(tape, &critic, points)?;
            let norms = tape.value(norms_node).data().to_vec();
            let g_max = norms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let k = tape.scalar(state.target_k);
            let resid = tape.sub(norms_node, k)?;
            let mean = tape.mean(tape.square(resid)?)?;
            let term = tape.mul(mean, tape.scalar(-state.rho / 2.0))?;
            Ok(RegOutcome { term: Some(term), g_max, norms })
        }
        RegKind::Lp => {
            let norms_node = grad_norms_node(tape, &critic, points)?;
            let norms = tape.value(norms_node).data().to_vec();
            let g_max = norms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let k = tape.scalar(state.target_k);
            let excess = tape.relu(tape.sub(norms_node, k)?)?;
            let mean = tape.mean(tape.square(excess)?)?;
            let term = tape.mul(mean, tape.scalar(-state.rho / 2.0))?;
            Ok(RegOutcome { term: Some(term), g_max, norms })
        }
        RegKind::MaxGp => {
            let (gmax_node, g_max, norms) = max_norm_parts(tape, &critic, points, state)?;
            let k = tape.scalar(state.target_k);
            let resid = tape.sub(gmax_node, k)?;
            let sq = tape.square(resid)?;
            let term = tape.mul(sq, tape.scalar(-state.rho / 2.0))?;
            Ok(RegOutcome { term: Some(term), g_max, norms })
        }
        RegKind::MaxAl => {
            let (gmax_node, g_max, norms) = max_norm_parts(tape, &critic, points, state)?;
            let k = tape.scalar(state.target_k);
            let resid = tape.sub(gmax_node, k)?;
            let linear = tape.mul(tape.scalar(state.lambda), resid)?;
            let quad = tape.mul(tape.square(resid)?, tape.scalar(state.rho / 2.0))?;
            let term = tape.sub(linear, quad)?;
            Ok(RegOutcome { term: Some(term), g_max, norms })
        }
    }
}

/// Multiplier step for the `maxal` kind: `lambda -= rho * (g_max - k)`,
/// applied once per optimizer step using the step's pre-update `g_max`.
pub fn update_lambda(state: &mut RegularizerState, g_max: f64) -> Result<(), RegError> {
    if state.kind != RegKind::MaxAl {
        return Err(RegError::WrongKind { expected: RegKind::MaxAl, got: state.kind });
    }
    if !g_max.is_finite() {
        return Err(RegError::NonFinite("g_max"));
    }
    state.lambda -= state.rho * (g_max - state.target_k);
    Ok(())
}

/// Empirical Lipschitz proxy: the largest gradient norm of `critic` over
/// `n_samples` random interpolates between random real and random fake
/// points (evaluated on a private tape).
pub fn lipschitz_estimate<F>(
    critic: F,
    real: &Tensor,
    fake: &Tensor,
    n_samples: usize,
    rng: &mut impl Rng,
) -> Result<f64, RegError>
where
    F: Fn(&Tape, NodeId) -> Result<NodeId, TapeError>,
{
    if real.rank() != 2 || fake.rank() != 2 || real.cols() != fake.cols() {
        return Err(RegError::BatchMismatch {
            real: real.shape().to_vec(),
            fake: fake.shape().to_vec(),
        });
    }
    if n_samples == 0 {
        return Err(RegError::InvalidConfig("need at least one sample".into()));
    }
    let d = real.cols();
    let mut rows = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let i = rng.gen_range(0..real.rows());
        let j = rng.gen_range(0..fake.rows());
        let t: f64 = rng.gen();
        let row: Vec<f64> =
            real.row(i).iter().zip(fake.row(j)).map(|(r, f)| t * r + (1.0 - t) * f).collect();
        rows.push(row);
    }
    let tape = Tape::new();
    let norms = grad_norms_node(&tape, &critic, &Tensor::matrix(n_samples, d, rows.concat())?)?;
    Ok(tape.value(norms).data().iter().cloned().fold(f64::NEG_INFINITY, f64::max))
}

/// Where the mean-squared penalty lets the critic's slope settle: maximizing
/// `k * w1 - (rho/2) * (k - 1)^2` over `k` gives `k = w1 / rho + 1`, so the
/// trained slope overshoots the target by `w1 / rho`.
pub fn predicted_penalty_optimum(w1: f64, rho: f64) -> Result<f64, RegError> {
    if !(rho > 0.0) {
        return Err(RegError::InvalidConfig(format!("rho must be positive, got {rho}")));
    }
    if !w1.is_finite() || w1 < 0.0 {
        return Err(RegError::InvalidConfig(format!("w1 must be non-negative, got {w1}")));
    }
    Ok(w1 / rho + 1.0)
}
