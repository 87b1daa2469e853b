//! Small dense networks and their training machinery.
//!
//! A [`Mlp`] owns plain parameter tensors; each training iteration binds them
//! onto a fresh [`Tape`] as leaves ([`Mlp::bind`]) and forwards through
//! `x @ W + b` layers. Spectral normalization replaces each bound weight by
//! `W / sigma(W)` where `sigma` is estimated by warm-started power iteration;
//! the division is recorded on the tape (with the singular vectors held as
//! constants), so parameter gradients flow through the quotient.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::tape::{NodeId, Tape, TapeError};
use crate::tensor::{Tensor, TensorError};

/// Norm threshold below which a matrix-vector product is treated as zero
/// during power iteration (the zero-matrix guard).
const POWER_ITERATION_TINY: f64 = 1e-30;

/// Errors from model construction, optimization, and checkpoint handling.
#[derive(Debug)]
pub enum NnError {
    /// A structural argument was invalid (empty layer list, bad clip bound…).
    Invalid(String),
    /// Spectral normalization met an all-zero weight matrix and cannot divide.
    ZeroMatrix { layer: usize },
    /// A gradient fed to Adam contained a non-finite value.
    NonFiniteGradient { param_index: usize },
    /// Underlying tape failure while binding or forwarding.
    Tape(TapeError),
    /// Underlying tensor construction failure.
    Tensor(TensorError),
    /// Checkpoint file could not be read or written.
    Io(std::io::Error),
    /// Checkpoint contents did not parse.
    Parse { line: usize, message: String },
}

impl fmt::Display for NnError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NnError::Invalid(m) => write!(f, "{m}"),
            NnError::ZeroMatrix { layer } => {
                write!(f, "layer {layer} weight matrix is zero; spectral norm undefined")
            }
            NnError::NonFiniteGradient { param_index } => {
                write!(f, "non-finite gradient for parameter {param_index}")
            }
            NnError::Tape(e) => write!(f, "tape error: {e}"),
            NnError::Tensor(e) => write!(f, "tensor error: {e}"),
            NnError::Io(e) => write!(f, "io error: {e}"),
            NnError::Parse { line, message } => write!(f, "checkpoint line {line}: {message}"),
        }
    }
}

impl std::error::Error for NnError {}

impl From<TapeError> for NnError {
    fn from(e: TapeError) -> Self {
        NnError::Tape(e)
    }
}

impl From<TensorError> for NnError {
    fn from(e: TensorError) -> Self {
        NnError::Tensor(e)
    }
}

impl From<std::io::Error> for NnError {
    fn from(e: std::io::Error) -> Self {
        NnError::Io(e)
    }
}

/// Per-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Linear,
    Relu,
    LeakyRelu(f64),
    Tanh,
}

impl Activation {
    fn apply(self, tape: &Tape, x: NodeId) -> Result<NodeId, TapeError> {
        match self {
            Activation::Linear => Ok(x),
            Activation::Relu => tape.relu(x),
            Activation::LeakyRelu(slope) => tape.leaky_relu(x, slope),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Linear => write!(f, "linear"),
            Activation::Relu => write!(f, "relu"),
            Activation::LeakyRelu(s) => write!(f, "leaky_relu:{s}"),
            Activation::Tanh => write!(f, "tanh"),
        }
    }
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(slope) = s.strip_prefix("leaky_relu:") {
            let slope: f64 = slope.parse().map_err(|_| format!("bad slope in `{s}`"))?;
            return Ok(Activation::LeakyRelu(slope));
        }
        match s {
            "linear" => Ok(Activation::Linear),
            "relu" => Ok(Activation::Relu),
            "leaky_relu" => Ok(Activation::LeakyRelu(0.2)),
            "tanh" => Ok(Activation::Tanh),
            _ => Err(format!("unknown activation `{s}`")),
        }
    }
}

/// One dense layer: weight `[in, out]`, bias `[out]`, then the activation.
#[derive(Debug, Clone)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

/// Persistent left/right singular-vector estimates for one layer, reused
/// across training steps so one power iteration per step suffices.
#[derive(Debug, Clone)]
pub struct SingularPair {
    /// Left vector, length = weight rows.
    pub u: Vec<f64>,
    /// Right vector, length = weight columns.
    pub v: Vec<f64>,
}

/// Spectral-normalization bookkeeping for a whole model.
#[derive(Debug, Clone)]
pub struct SpectralNorm {
    pub pairs: Vec<SingularPair>,
    /// Power iterations run per [`Mlp::bind`] call.
    pub power_iters: usize,
}

/// A multilayer perceptron over `f64` tensors.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub spectral: Option<SpectralNorm>,
}

impl Mlp {
    /// Builds a network with the given layer widths (`dims[0]` inputs through
    /// `dims.last()` outputs), `hidden` activation on all but the last layer
    /// and `output` activation on the last. Weights are Glorot-scaled
    /// Gaussian draws from `rng`; biases start at zero.
    pub fn new(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut impl Rng,
    ) -> Result<Mlp, NnError> {
        if dims.len() < 2 {
            return Err(NnError::Invalid(format!(
                "need at least input and output widths, got {dims:?}"
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(NnError::Invalid(format!("zero width in {dims:?}")));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, pair) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let scale = (2.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    z * scale
                })
                .collect();
            let weight = Tensor::matrix(fan_in, fan_out, data)?;
            let bias = Tensor::zeros(&[fan_out])?;
            let activation = if i + 1 == dims.len() - 1 { output } else { hidden };
            layers.push(Layer { weight, bias, activation });
        }
        Ok(Mlp { layers, spectral: None })
    }

    /// Enables spectral normalization, initializing each layer's singular
    /// vectors to random unit vectors drawn from `rng`.
    pub fn with_spectral_norm(mut self, power_iters: usize, rng: &mut impl Rng) -> Result<Mlp, NnError> {
        if power_iters == 0 {
            return Err(NnError::Invalid("power_iters must be at least 1".into()));
        }
        let pairs = self
            .layers
            .iter()
            .map(|layer| {
                let r = layer.weight.rows();
                let c = layer.weight.cols();
                SingularPair { u: random_unit(r, rng), v: random_unit(c, rng) }
            })
            .collect();
        self.spectral = Some(SpectralNorm { pairs, power_iters });
        Ok(self)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("mlp has layers").weight.cols()
    }

    /// Parameter tensors in the fixed order `w0, b0, w1, b1, …` used by the
    /// optimizer and by [`BoundMlp::param_ids`].
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    /// Binds parameters onto `tape` for a training step. With spectral
    /// normalization enabled this advances the power iteration (mutating the
    /// stored singular vectors) and emits the `W / sigma` quotient in-graph.
    pub fn bind(&mut self, tape: &Tape) -> Result<BoundMlp, NnError> {
        let iters = self.spectral.as_ref().map(|s| s.power_iters);
        if let (Some(iters), Some(spectral)) = (iters, self.spectral.as_mut()) {
            for (i, (layer, pair)) in self.layers.iter().zip(spectral.pairs.iter_mut()).enumerate() {
                let sigma = power_iteration_sigma(&layer.weight, pair, iters)?;
                if sigma == 0.0 {
                    return Err(NnError::ZeroMatrix { layer: i });
                }
            }
        }
        bind_layers(&self.layers, self.spectral.as_ref(), tape)
    }

    /// Binds parameters for evaluation without touching any stored state
    /// (spectral layers reuse the current singular-vector estimates).
    pub fn bind_eval(&self, tape: &Tape) -> Result<BoundMlp, NnError> {
        bind_layers(&self.layers, self.spectral.as_ref(), tape)
    }

    /// Runs extra power iterations on every layer, tightening the stored
    /// singular-vector estimates (useful before precise evaluation).
    pub fn refresh_spectral_state(&mut self, iters: usize) -> Result<(), NnError> {
        let Some(spectral) = self.spectral.as_mut() else {
            return Err(NnError::Invalid("spectral normalization is not enabled".into()));
        };
        for (i, (layer, pair)) in self.layers.iter().zip(spectral.pairs.iter_mut()).enumerate() {
            let sigma = power_iteration_sigma(&layer.weight, pair, iters)?;
            if sigma == 0.0 {
                return Err(NnError::ZeroMatrix { layer: i });
            }
        }
        Ok(())
    }

    /// An evaluation closure that binds this model onto whatever tape the
    /// caller supplies. Diagnostic helpers that build their own tapes
    /// (`lipschitz_estimate`, the transport checks, field exports) take the
    /// critic in this shape.
    pub fn as_fn(&self) -> impl Fn(&Tape, NodeId) -> Result<NodeId, TapeError> + '_ {
        move |tape, x| {
            let bound = self.bind_eval(tape).map_err(|e| match e {
                NnError::Tape(t) => t,
                // A zero spectral layer would divide by zero on the tape
                // anyway; report it through the same channel.
                _ => TapeError::NonFinite { op: "spectral_norm" },
            })?;
            bound.forward(tape, x)
        }
    }
}

fn bind_layers(
    layers: &[Layer],
    spectral: Option<&SpectralNorm>,
    tape: &Tape,
) -> Result<BoundMlp, NnError> {
    let mut bound_layers = Vec::with_capacity(layers.len());
    let mut params = Vec::with_capacity(layers.len() * 2);
    for (i, layer) in layers.iter().enumerate() {
        let w = tape.leaf(layer.weight.clone(), true);
        let b = tape.leaf(layer.bias.clone(), true);
        params.push(w);
        params.push(b);
        let effective = match spectral {
            None => w,
            Some(sn) => {
                let pair = &sn.pairs[i];
                // sigma = u^T W v recorded on the tape with u, v constant, so
                // d(W / sigma)/dW includes the quotient-rule term.
                let u = tape.constant(Tensor::matrix(1, pair.u.len(), pair.u.clone())?);
                let v = tape.constant(Tensor::matrix(pair.v.len(), 1, pair.v.clone())?);
                let uw = tape.matmul(u, w)?;
                let sigma = tape.matmul(uw, v)?;
                if tape.item(sigma) == 0.0 {
                    return Err(NnError::ZeroMatrix { layer: i });
                }
                tape.div(w, sigma)?
            }
        };
        bound_layers.push(BoundLayer { weight: effective, bias: b, activation: layer.activation });
    }
    Ok(BoundMlp { layers: bound_layers, params })
}

struct BoundLayer {
    weight: NodeId,
    bias: NodeId,
    activation: Activation,
}

/// A model whose parameters live as leaves on one specific tape.
pub struct BoundMlp {
    layers: Vec<BoundLayer>,
    params: Vec<NodeId>,
}

impl BoundMlp {
    /// Forward pass over an `[n, in]` batch, producing `[n, out]`.
    pub fn forward(&self, tape: &Tape, x: NodeId) -> Result<NodeId, TapeError> {
        let mut h = x;
        for layer in &self.layers {
            let lin = tape.matmul(h, layer.weight)?;
            let biased = tape.add(lin, layer.bias)?;
            h = layer.activation.apply(tape, biased)?;
        }
        Ok(h)
    }

    /// Raw parameter leaves in the same order as [`Mlp::params`].
    pub fn param_ids(&self) -> &[NodeId] {
        &self.params
    }
}

fn random_unit(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

/// Estimates the largest singular value of `w` by `iters` rounds of power
/// iteration, warm-starting from (and updating) `pair`. Returns `0.0` for an
/// all-zero matrix without touching the stored vectors; callers must not
/// divide by that result.
pub fn power_iteration_sigma(
    w: &Tensor,
    pair: &mut SingularPair,
    iters: usize,
) -> Result<f64, NnError> {
    if w.rank() != 2 {
        return Err(NnError::Invalid(format!("weight must be a matrix, got {:?}", w.shape())));
    }
    if iters == 0 {
        return Err(NnError::Invalid("power iteration needs at least one round".into()));
    }
    let (rows, cols) = (w.rows(), w.cols());
    if pair.u.len() != rows || pair.v.len() != cols {
        return Err(NnError::Invalid(format!(
            "singular-vector lengths ({}, {}) do not match weight shape [{rows}, {cols}]",
            pair.u.len(),
            pair.v.len()
        )));
    }
    let mut u = pair.u.clone();
    let mut v = pair.v.clone();
    for _ in 0..iters {
        // v <- normalize(W^T u), u <- normalize(W v).
        let mut wv = vec![0.0; cols];
        for i in 0..rows {
            let row = w.row(i);
            for j in 0..cols {
                wv[j] += row[j] * u[i];
            }
        }
        if !normalize(&mut wv) {
            return Ok(0.0);
        }
        v = wv;
        let mut wu = vec![0.0; rows];
        for i in 0..rows {
            wu[i] = w.row(i).iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        if !normalize(&mut wu) {
            return Ok(0.0);
        }
        u = wu;
    }
    let mut sigma = 0.0;
    for i in 0..rows {
        let wi_v: f64 = w.row(i).iter().zip(&v).map(|(a, b)| a * b).sum();
        sigma += u[i] * wi_v;
    }
    pair.u = u;
    pair.v = v;
    Ok(sigma)
}

fn normalize(v: &mut [f64]) -> bool {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < POWER_ITERATION_TINY {
        return false;
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    true
}

/// Clamps every weight and bias of `model` into `[-bound, bound]`.
pub fn clip_weights(model: &mut Mlp, bound: f64) -> Result<(), NnError> {
    if !(bound > 0.0) {
        return Err(NnError::Invalid(format!("clip bound must be positive, got {bound}")));
    }
    for layer in &mut model.layers {
        for x in layer.weight.data_mut() {
            *x = x.clamp(-bound, bound);
        }
        for x in layer.bias.data_mut() {
            *x = x.clamp(-bound, bound);
        }
    }
    Ok(())
}

/// Adam hyperparameters. The defaults follow the momentum-free setting used
/// throughout this crate's experiments: `beta1 = 0`, `beta2 = 0.9`.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-4, beta1: 0.0, beta2: 0.9, epsilon: 1e-8 }
    }
}

/// Adam optimizer state (first/second moment estimates and step counter).
#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    /// Initializes zero moments matching `params`' shapes.
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Result<AdamState, NnError> {
        let zeros = |t: &&Tensor| Tensor::zeros(t.shape());
        let m = params.iter().map(zeros).collect::<Result<Vec<_>, _>>()?;
        let v = params.iter().map(zeros).collect::<Result<Vec<_>, _>>()?;
        Ok(AdamState { config, m, v, step: 0 })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Second-moment tensors (non-negative by construction); exposed for
    /// inspection in tests.
    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    /// One update with the configured learning rate.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<(), NnError> {
        self.step_with_lr(params, grads, self.config.learning_rate)
    }

    /// One bias-corrected Adam update with an explicit learning rate (used by
    /// decay schedules). Rejects non-finite gradients before touching any
    /// state.
    pub fn step_with_lr(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Tensor],
        learning_rate: f64,
    ) -> Result<(), NnError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NnError::Invalid(format!(
                "expected {} parameters and gradients, got {} and {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (param, grad)) in params.iter().zip(grads).enumerate() {
            if param.shape() != grad.shape() {
                return Err(NnError::Invalid(format!(
                    "gradient {i} shape {:?} does not match parameter shape {:?}",
                    grad.shape(),
                    param.shape()
                )));
            }
            if !grad.is_finite() {
                return Err(NnError::NonFiniteGradient { param_index: i });
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, epsilon, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = &grads[i];
            self.m[i] = self.m[i].zip_map(g, |m, g| beta1 * m + (1.0 - beta1) * g);
            self.v[i] = self.v[i].zip_map(g, |v, g| beta2 * v + (1.0 - beta2) * g * g);
            let m = &self.m[i];
            let v = &self.v[i];
            let p = params[i].data_mut();
            for ((p, &m), &v) in p.iter_mut().zip(m.data()).zip(v.data()) {
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

// ── checkpoint format ───────────────────────────────────────────────────
//
// Line-based text, versioned by the first line:
//
//   lipgan-mlp v1
//   layers <L>
//   layer <i> <in> <out> <activation>
//   weight <in*out floats, row-major>
//   bias <out floats>
//   …
//   sn <power_iters>          (only when spectral normalization is enabled)
//   sn_u <i> <floats>
//   sn_v <i> <floats>
//   end
//
// Floats are written with Rust's shortest round-trip formatting, so
// save → load reproduces parameters bit for bit.

const CHECKPOINT_HEADER: &str = "lipgan-mlp v1";

impl Mlp {
    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let mut out = String::new();
        out.push_str(CHECKPOINT_HEADER);
        out.push('\n');
        out.push_str(&format!("layers {}\n", self.layers.len()));
        for (i, layer) in self.layers.iter().enumerate() {
            out.push_str(&format!(
                "layer {i} {} {} {}\n",
                layer.weight.rows(),
                layer.weight.cols(),
                layer.activation
            ));
            out.push_str("weight");
            for x in layer.weight.data() {
                out.push_str(&format!(" {x}"));
            }
            out.push('\n');
            out.push_str("bias");
            for x in layer.bias.data() {
                out.push_str(&format!(" {x}"));
            }
            out.push('\n');
        }
        if let Some(sn) = &self.spectral {
            out.push_str(&format!("sn {}\n", sn.power_iters));
            for (i, pair) in sn.pairs.iter().enumerate() {
                out.push_str(&format!("sn_u {i}"));
                for x in &pair.u {
                    out.push_str(&format!(" {x}"));
                }
                out.push('\n');
                out.push_str(&format!("sn_v {i}"));
                for x in &pair.v {
                    out.push_str(&format!(" {x}"));
                }
                out.push('\n');
            }
        }
        out.push_str("end\n");
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Mlp, NnError> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines().enumerate();
        let mut next = |expect: &str| -> Result<(usize, String), NnError> {
            lines
                .next()
                .map(|(i, l)| (i + 1, l.to_string()))
                .ok_or_else(|| NnError::Parse { line: 0, message: format!("missing {expect}") })
        };

        let (line, header) = next("header")?;
        if header != CHECKPOINT_HEADER {
            return Err(NnError::Parse { line, message: format!("unrecognized header `{header}`") });
        }
        let (line, count_line) = next("layer count")?;
        let count: usize = count_line
            .strip_prefix("layers ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| NnError::Parse { line, message: "expected `layers <n>`".into() })?;

        let mut layers = Vec::with_capacity(count);
        for expected in 0..count {
            let (line, meta) = next("layer header")?;
            let parts: Vec<&str> = meta.split_whitespace().collect();
            if parts.len() != 5 || parts[0] != "layer" {
                return Err(NnError::Parse { line, message: "expected `layer <i> <in> <out> <act>`".into() });
            }
            let idx: usize = parts[1]
                .parse()
                .map_err(|_| NnError::Parse { line, message: "bad layer index".into() })?;
            if idx != expected {
                return Err(NnError::Parse { line, message: format!("layer {idx} out of order") });
            }
            let rows: usize = parts[2]
                .parse()
                .map_err(|_| NnError::Parse { line, message: "bad input width".into() })?;
            let cols: usize = parts[3]
                .parse()
                .map_err(|_| NnError::Parse { line, message: "bad output width".into() })?;
            let activation: Activation = parts[4]
                .parse()
                .map_err(|m| NnError::Parse { line, message: m })?;

            let (line, wline) = next("weight line")?;
            let weight = parse_floats(&wline, "weight", line)?;
            if weight.len() != rows * cols {
                return Err(NnError::Parse {
                    line,
                    message: format!("expected {} weights, got {}", rows * cols, weight.len()),
                });
            }
            let (line, bline) = next("bias line")?;
            let bias = parse_floats(&bline, "bias", line)?;
            if bias.len() != cols {
                return Err(NnError::Parse {
                    line,
                    message: format!("expected {cols} biases, got {}", bias.len()),
                });
            }
            layers.push(Layer {
                weight: Tensor::matrix(rows, cols, weight)?,
                bias: Tensor::new(vec![cols], bias)?,
                activation,
            });
        }

        let (line, tail) = next("trailer")?;
        let spectral = if let Some(iters) = tail.strip_prefix("sn ") {
            let power_iters: usize = iters
                .parse()
                .map_err(|_| NnError::Parse { line, message: "bad power iteration count".into() })?;
            let mut pairs = Vec::with_capacity(count);
            for i in 0..count {
                let (line, uline) = next("sn_u line")?;
                let u = parse_floats(&uline, &format!("sn_u {i}"), line)?;
                let (line, vline) = next("sn_v line")?;
                let v = parse_floats(&vline, &format!("sn_v {i}"), line)?;
                pairs.push(SingularPair { u, v });
            }
            let (line, end) = next("end")?;
            if end != "end" {
                return Err(NnError::Parse { line, message: "expected `end`".into() });
            }
            Some(SpectralNorm { pairs, power_iters })
        } else if tail == "end" {
            None
        } else {
            return Err(NnError::Parse { line, message: format!("unexpected trailer `{tail}`") });
        };

        Ok(Mlp { layers, spectral })
    }
}

fn parse_floats(line_text: &str, prefix: &str, line: usize) -> Result<Vec<f64>, NnError> {
    let mut parts = line_text.split_whitespace();
    let mut seen = String::new();
    for token in prefix.split_whitespace() {
        match parts.next() {
            Some(t) if t == token => {
                seen.push_str(t);
                seen.push(' ');
            }
            _ => {
                return Err(NnError::Parse {
                    line,
                    message: format!("expected line starting with `{prefix}`"),
                })
            }
        }
    }
    parts
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| NnError::Parse { line, message: format!("bad float `{t}`") })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn forward_matches_hand_rolled_matrix_arithmetic() {
        let mut model = Mlp::new(&[2, 3, 1], Activation::LeakyRelu(0.2), Activation::Linear, &mut rng(11)).unwrap();
        let x = vec![0.7, -1.3];
        // Independent forward with plain loops.
        let mut h = x.clone();
        for layer in &model.layers {
            let (rows, cols) = (layer.weight.rows(), layer.weight.cols());
            let mut out = vec![0.0; cols];
            for j in 0..cols {
                let mut acc = layer.bias.data()[j];
                for i in 0..rows {
                    acc += h[i] * layer.weight.data()[i * cols + j];
                }
                out[j] = match layer.activation {
                    Activation::LeakyRelu(s) => {
                        if acc > 0.0 {
                            acc
                        } else {
                            s * acc
                        }
                    }
                    Activation::Linear => acc,
                    _ => unreachable!(),
                };
            }
            h = out;
        }
        let expected = h[0];

        let tape = Tape::new();
        let bound = model.bind(&tape).unwrap();
        let input = tape.constant(Tensor::matrix(1, 2, x).unwrap());
        let out = bound.forward(&tape, input).unwrap();
        assert!((tape.item(out) - expected).abs() < 1e-12);
    }

    #[test]
    fn forward_rejects_wrong_input_width() {
        let mut model = Mlp::new(&[3, 2], Activation::Relu, Activation::Linear, &mut rng(0)).unwrap();
        let tape = Tape::new();
        let bound = model.bind(&tape).unwrap();
        let bad = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        assert!(matches!(bound.forward(&tape, bad), Err(TapeError::ShapeMismatch { .. })));
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // With beta1 = 0 and a unit gradient, bias correction makes the first
        // update almost exactly the learning rate.
        let mut p = Tensor::scalar(1.0);
        let config = AdamConfig { learning_rate: 0.1, ..AdamConfig::default() };
        let mut adam = AdamState::new(config, &[&p]).unwrap();
        adam.step(&mut [&mut p], &[Tensor::scalar(1.0)]).unwrap();
        assert!((p.item() - 0.9).abs() < 1e-6, "param {} should be near 0.9", p.item());
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut p = Tensor::vector(&[0.4, -0.2]).unwrap();
        let before = p.clone();
        let mut adam = AdamState::new(AdamConfig::default(), &[&p]).unwrap();
        adam.step(&mut [&mut p], &[Tensor::zeros(&[2]).unwrap()]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_rejects_nan_gradient_before_updating() {
        let mut p = Tensor::scalar(1.0);
        let mut adam = AdamState::new(AdamConfig::default(), &[&p]).unwrap();
        let err = adam.step(&mut [&mut p], &[Tensor::scalar(f64::NAN)]);
        assert!(matches!(err, Err(NnError::NonFiniteGradient { param_index: 0 })));
        assert_eq!(p.item(), 1.0);
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn clip_is_idempotent_and_bounds_all_parameters() {
        let mut model = Mlp::new(&[2, 4, 1], Activation::Relu, Activation::Linear, &mut rng(3)).unwrap();
        clip_weights(&mut model, 0.05).unwrap();
        let snapshot: Vec<Vec<f64>> = model.params().iter().map(|t| t.data().to_vec()).collect();
        for t in model.params() {
            assert!(t.data().iter().all(|x| x.abs() <= 0.05));
        }
        clip_weights(&mut model, 0.05).unwrap();
        let again: Vec<Vec<f64>> = model.params().iter().map(|t| t.data().to_vec()).collect();
        assert_eq!(snapshot, again);
        assert!(clip_weights(&mut model, 0.0).is_err());
    }

    #[test]
    fn power_iteration_recovers_diagonal_singular_value() {
        let w = Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 1.0]).unwrap();
        let mut pair = SingularPair { u: vec![0.6, 0.8], v: vec![0.8, 0.6] };
        let sigma = power_iteration_sigma(&w, &mut pair, 50).unwrap();
        assert!((sigma - 2.0).abs() < 1e-6, "sigma {sigma}");
    }

    #[test]
    fn power_iteration_on_identity_is_one() {
        let w = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let mut pair = SingularPair { u: random_unit(3, &mut rng(5)), v: random_unit(3, &mut rng(6)) };
        let sigma = power_iteration_sigma(&w, &mut pair, 10).unwrap();
        assert!((sigma - 1.0).abs() < 1e-9);
    }

    #[test]
    fn power_iteration_zero_matrix_reports_zero_without_corrupting_state() {
        let w = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let mut pair = SingularPair { u: vec![1.0, 0.0], v: vec![0.0, 1.0, 0.0] };
        let before = pair.clone();
        let sigma = power_iteration_sigma(&w, &mut pair, 3).unwrap();
        assert_eq!(sigma, 0.0);
        assert_eq!(pair.u, before.u);
        assert_eq!(pair.v, before.v);
    }

    #[test]
    fn power_iteration_estimates_are_monotone_on_gram_matrices() {
        // On a symmetric positive semidefinite matrix the estimate after each
        // extra iteration can only grow (ratios of successive moments).
        let mut r = rng(17);
        for _ in 0..20 {
            let data: Vec<f64> = (0..16).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
            let w = Tensor::matrix(4, 4, data).unwrap();
            let gram = w.transpose().matmul(&w);
            let mut pair = SingularPair { u: random_unit(4, &mut r), v: random_unit(4, &mut r) };
            let mut prev = 0.0;
            for _ in 0..12 {
                let sigma = power_iteration_sigma(&gram, &mut pair, 1).unwrap();
                assert!(sigma >= prev - 1e-9, "estimate dropped from {prev} to {sigma}");
                prev = sigma;
            }
        }
    }

    #[test]
    fn spectral_bind_scales_weights_by_sigma() {
        // A single layer with singular value 2 must forward as if divided by
        // (approximately) 2 once the power iteration has converged.
        let mut model = Mlp::new(&[2, 2], Activation::Linear, Activation::Linear, &mut rng(8)).unwrap();
        model.layers[0].weight = Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 0.5]).unwrap();
        let mut model = model.with_spectral_norm(1, &mut rng(9)).unwrap();
        model.refresh_spectral_state(200).unwrap();
        let tape = Tape::new();
        let bound = model.bind(&tape).unwrap();
        let x = tape.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let y = bound.forward(&tape, x).unwrap();
        let v = tape.value(y);
        assert!((v.data()[0] - 1.0).abs() < 1e-6, "normalized output {:?}", v.data());
    }

    #[test]
    fn spectral_bind_rejects_zero_layer() {
        let mut model = Mlp::new(&[2, 2], Activation::Linear, Activation::Linear, &mut rng(8)).unwrap();
        model.layers[0].weight = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        let mut model = model.with_spectral_norm(1, &mut rng(9)).unwrap();
        let tape = Tape::new();
        assert!(matches!(model.bind(&tape), Err(NnError::ZeroMatrix { layer: 0 })));
    }

    #[test]
    fn checkpoint_round_trips_bit_for_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut model = Mlp::new(&[3, 5, 2], Activation::LeakyRelu(0.2), Activation::Tanh, &mut rng(21)).unwrap();
        let model_sn = model.clone().with_spectral_norm(2, &mut rng(22)).unwrap();
        for candidate in [&mut model, &mut model_sn.clone()] {
            candidate.save(&path).unwrap();
            let loaded = Mlp::load(&path).unwrap();
            assert_eq!(loaded.layers.len(), candidate.layers.len());
            for (a, b) in loaded.layers.iter().zip(&candidate.layers) {
                assert_eq!(a.weight, b.weight);
                assert_eq!(a.bias, b.bias);
                assert_eq!(a.activation, b.activation);
            }
            match (&loaded.spectral, &candidate.spectral) {
                (None, None) => {}
                (Some(a), Some(b)) => {
                    assert_eq!(a.power_iters, b.power_iters);
                    for (pa, pb) in a.pairs.iter().zip(&b.pairs) {
                        assert_eq!(pa.u, pb.u);
                        assert_eq!(pa.v, pb.v);
                    }
                }
                _ => panic!("spectral state lost in round trip"),
            }
        }
    }

    #[test]
    fn checkpoint_rejects_corrupted_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, "not-a-checkpoint\n").unwrap();
        assert!(matches!(Mlp::load(&path), Err(NnError::Parse { line: 1, .. })));
    }
}
