//! Critic and generator training loops.
//!
//! Losses are written as *minimized* quantities; the regularizer terms of
//! [`crate::reg`] are expressed as additions to the maximized objective, so
//! the trainer subtracts them from the loss exactly once. Each iteration
//! binds the model onto a fresh tape, differentiates loss plus penalty in a
//! single backward pass (the penalty's gradient-norm subgraph is recorded,
//! which is why the pass can be differentiated again), and applies one Adam
//! update.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::metrics::MetricsRecord;
use crate::nn::{clip_weights, AdamConfig, AdamState, Activation, Mlp, NnError};
use crate::ot::{
    dual_objective, exact_w1, matched_quotient_bound, alignment_report, matched_gap_report,
    OtError, PointCloud, TransportPlan,
};
use crate::reg::{
    apply_regularizer, lipschitz_estimate, sample_interpolations, update_lambda, RegConfig,
    RegError, RegKind, RegularizerState,
};
use crate::tape::{NodeId, Tape, TapeError};
use crate::tensor::Tensor;

/// Training aborts once the critic objective leaves `[-1e6, 1e6]`.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

/// Interior sample positions `0.05, 0.10, …, 0.95` used when checking
/// gradient alignment along matched segments.
pub fn segment_t_grid() -> Vec<f64> {
    (1..20).map(|i| i as f64 * 0.05).collect()
}

/// The adversarial objective family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectiveKind {
    /// Critic maximizes the mean difference (a transport dual).
    #[serde(rename = "wgan")]
    Wgan,
    /// Margin objective: `relu(1 - f(real)) + relu(1 + f(fake))`.
    #[serde(rename = "hinge")]
    Hinge,
    /// Logistic objective with non-saturating generator loss.
    #[serde(rename = "vanilla")]
    Vanilla,
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ObjectiveKind::Wgan => "wgan",
            ObjectiveKind::Hinge => "hinge",
            ObjectiveKind::Vanilla => "vanilla",
        };
        write!(f, "{name}")
    }
}

impl std::str::FromStr for ObjectiveKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "wgan" => Ok(ObjectiveKind::Wgan),
            "hinge" => Ok(ObjectiveKind::Hinge),
            "vanilla" => Ok(ObjectiveKind::Vanilla),
            _ => Err(format!("unknown objective `{s}`")),
        }
    }
}

/// Critic loss (minimized) over per-sample outputs `f_real` and `f_fake`.
pub fn d_loss(
    tape: &Tape,
    objective: ObjectiveKind,
    f_real: NodeId,
    f_fake: NodeId,
) -> Result<NodeId, TapeError> {
    match objective {
        ObjectiveKind::Wgan => {
            let mf = tape.mean(f_fake)?;
            let mr = tape.mean(f_real)?;
            tape.sub(mf, mr)
        }
        ObjectiveKind::Hinge => {
            let one = tape.scalar(1.0);
            let real_term = tape.mean(tape.relu(tape.sub(one, f_real)?)?)?;
            let fake_term = tape.mean(tape.relu(tape.add(one, f_fake)?)?)?;
            tape.add(real_term, fake_term)
        }
        ObjectiveKind::Vanilla => {
            let real_term = tape.mean(tape.softplus(tape.neg(f_real)?)?)?;
            let fake_term = tape.mean(tape.softplus(f_fake)?)?;
            tape.add(real_term, fake_term)
        }
    }
}

/// Generator loss (minimized) over per-sample critic outputs on fakes.
pub fn g_loss(
    tape: &Tape,
    objective: ObjectiveKind,
    f_fake: NodeId,
) -> Result<NodeId, TapeError> {
    match objective {
        ObjectiveKind::Wgan | ObjectiveKind::Hinge => tape.neg(tape.mean(f_fake)?),
        ObjectiveKind::Vanilla => tape.mean(tape.softplus(tape.neg(f_fake)?)?),
    }
}

/// Learning-rate schedule over a fixed iteration budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecaySchedule {
    #[serde(rename = "constant")]
    Constant,
    /// Halve the rate at 25%, 50%, and 75% of the run.
    #[serde(rename = "step_halving")]
    StepHalving,
}

/// The learning rate in effect at `iteration` of `total`.
pub fn decayed_lr(base: f64, schedule: DecaySchedule, iteration: usize, total: usize) -> f64 {
    match schedule {
        DecaySchedule::Constant => base,
        DecaySchedule::StepHalving => {
            let quarter = ((4 * iteration) / total).min(3);
            base * 0.5f64.powi(quarter as i32)
        }
    }
}

/// Everything a training run needs to be reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: ObjectiveKind,
    pub regularizer: RegConfig,
    pub iterations: usize,
    pub batch_size: usize,
    /// Critic updates per generator update (adversarial loop only).
    pub d_steps: usize,
    pub d_learning_rate: f64,
    pub g_learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub decay: DecaySchedule,
    pub seed: u64,
    /// Generator input dimension.
    pub prior_dim: usize,
    /// Hidden widths of the critic.
    pub d_hidden: Vec<usize>,
    /// Hidden widths of the generator.
    pub g_hidden: Vec<usize>,
    pub leaky_slope: f64,
    /// Gradient-norm samples per Lipschitz estimate.
    pub estimate_samples: usize,
    /// Cadence (in iterations) of the expensive diagnostics: segment
    /// alignment, matched gaps, and — in the adversarial loop — the exact
    /// transport oracle.
    pub eval_every: usize,
    /// Optional convergence-based stopping for critic fitting: end the run
    /// at the first diagnostic iteration whose minimum matched-pair cosine
    /// reaches this value. `iterations` stays the hard budget.
    pub stop_min_cosine: Option<f64>,
    /// Iterations between multiplier updates. The update has unit feedback
    /// gain through the critic's best response, so applying it every step
    /// makes the pair oscillate; spacing updates lets the critic settle
    /// first, after which each update is nearly exact.
    pub lambda_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: ObjectiveKind::Wgan,
            regularizer: RegConfig::default(),
            iterations: 3000,
            batch_size: 16,
            d_steps: 5,
            d_learning_rate: 1e-3,
            g_learning_rate: 1e-4,
            adam_beta1: 0.0,
            adam_beta2: 0.9,
            adam_epsilon: 1e-8,
            decay: DecaySchedule::StepHalving,
            seed: 0,
            prior_dim: 4,
            d_hidden: vec![64, 64],
            g_hidden: vec![64, 64],
            leaky_slope: 0.2,
            estimate_samples: 64,
            eval_every: 25,
            stop_min_cosine: None,
            lambda_every: 1,
        }
    }
}

impl TrainConfig {
    /// Rejects configurations that cannot train (zero budgets, non-positive
    /// rates). The same rules guard both entry points and `validate` mode.
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.iterations == 0 {
            return Err(TrainError::InvalidConfig("iterations must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be positive".into()));
        }
        if self.d_steps == 0 {
            return Err(TrainError::InvalidConfig("d_steps must be positive".into()));
        }
        if !(self.d_learning_rate > 0.0) || !(self.g_learning_rate > 0.0) {
            return Err(TrainError::InvalidConfig("learning rates must be positive".into()));
        }
        if self.prior_dim == 0 {
            return Err(TrainError::InvalidConfig("prior_dim must be positive".into()));
        }
        if self.estimate_samples == 0 {
            return Err(TrainError::InvalidConfig("estimate_samples must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(TrainError::InvalidConfig("eval_every must be positive".into()));
        }
        if let Some(c) = self.stop_min_cosine {
            if !(c > 0.0 && c <= 1.0) {
                return Err(TrainError::InvalidConfig(
                    "stop_min_cosine must lie in (0, 1]".into(),
                ));
            }
        }
        if self.lambda_every == 0 {
            return Err(TrainError::InvalidConfig("lambda_every must be positive".into()));
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            learning_rate: lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }
}

/// Training failures. The abort variants carry every metrics row recorded
/// before the failing iteration.
#[derive(Debug)]
pub enum TrainError {
    InvalidConfig(String),
    /// The critic objective left the divergence window.
    Diverged { iteration: u64, value: f64, metrics: Vec<MetricsRecord> },
    /// A non-finite value surfaced (loss, gradient, or activation).
    NonFinite { iteration: u64, reason: String, metrics: Vec<MetricsRecord> },
    Ot(OtError),
    Reg(RegError),
    Nn(NnError),
    Tape(TapeError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::InvalidConfig(m) => write!(f, "{m}"),
            TrainError::Diverged { iteration, value, .. } => {
                write!(f, "objective diverged to {value} at iteration {iteration}")
            }
            TrainError::NonFinite { iteration, reason, .. } => {
                write!(f, "non-finite value at iteration {iteration}: {reason}")
            }
            TrainError::Ot(e) => write!(f, "transport oracle: {e}"),
            TrainError::Reg(e) => write!(f, "regularizer: {e}"),
            TrainError::Nn(e) => write!(f, "model: {e}"),
            TrainError::Tape(e) => write!(f, "tape: {e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<OtError> for TrainError {
    fn from(e: OtError) -> Self {
        TrainError::Ot(e)
    }
}

impl From<NnError> for TrainError {
    fn from(e: NnError) -> Self {
        TrainError::Nn(e)
    }
}

impl From<RegError> for TrainError {
    fn from(e: RegError) -> Self {
        TrainError::Reg(e)
    }
}

impl From<TapeError> for TrainError {
    fn from(e: TapeError) -> Self {
        TrainError::Tape(e)
    }
}

/// Independent deterministic random streams derived from one seed. Keeping
/// each consumer on its own stream means adding samples to one never shifts
/// another.
pub(crate) fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

const STREAM_INIT_D: u64 = 0;
const STREAM_INIT_G: u64 = 1;
const STREAM_BATCH: u64 = 2;
const STREAM_INTERP: u64 = 3;
const STREAM_ESTIMATE: u64 = 4;
const STREAM_PRIOR: u64 = 5;
const STREAM_EVAL: u64 = 7;

/// `[n, d]` matrix of standard normal draws.
pub fn standard_normal_matrix(n: usize, d: usize, rng: &mut impl Rng) -> Tensor {
    let data = (0..n * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::matrix(n, d, data).expect("shape matches data by construction")
}

fn gather_rows(cloud: &PointCloud, indices: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = indices.iter().map(|&i| cloud.point(i).to_vec()).collect();
    Tensor::from_rows(&rows).expect("cloud rows are equally sized")
}

/// Runs `model` on `z` without recording anything observable.
pub fn generate(model: &Mlp, z: &Tensor) -> Result<Tensor, NnError> {
    let tape = Tape::new();
    let bound = model.bind_eval(&tape)?;
    let input = tape.constant(z.clone());
    let out = bound.forward(&tape, input)?;
    Ok(tape.value(out))
}

fn tensor_to_cloud(t: &Tensor) -> PointCloud {
    let rows: Vec<Vec<f64>> = (0..t.rows()).map(|i| t.row(i).to_vec()).collect();
    PointCloud::new(rows).expect("row tensor is a valid cloud")
}

/// A trained critic plus everything measured on the way.
pub struct FitResult {
    pub model: Mlp,
    pub metrics: Vec<MetricsRecord>,
    pub reg: RegularizerState,
    /// Exact transport distance between the two clouds.
    pub w1: f64,
    /// The optimal matching (source = real cloud, target = fake cloud).
    pub plan: TransportPlan,
}

fn build_critic(dim: usize, config: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Mlp, TrainError> {
    let mut dims = vec![dim];
    dims.extend_from_slice(&config.d_hidden);
    dims.push(1);
    let model = Mlp::new(&dims, Activation::LeakyRelu(config.leaky_slope), Activation::Linear, rng)?;
    if config.regularizer.kind == RegKind::SpectralNorm {
        Ok(model.with_spectral_norm(config.regularizer.sn_power_iters, rng)?)
    } else {
        Ok(model)
    }
}

/// One critic update on already-gathered batches. Returns the objective
/// value (before the penalty) and the step's maximum interpolate gradient
/// norm.
#[allow(clippy::too_many_arguments)]
fn critic_step(
    model: &mut Mlp,
    adam: &mut AdamState,
    reg: &mut RegularizerState,
    config: &TrainConfig,
    lr: f64,
    real_batch: &Tensor,
    fake_batch: &Tensor,
    rng_interp: &mut ChaCha8Rng,
    update_multiplier: bool,
) -> Result<(f64, f64), TrainError> {
    let tape = Tape::new();
    let bound = model.bind(&tape)?;
    let xr = tape.constant(real_batch.clone());
    let xf = tape.constant(fake_batch.clone());
    let f_real = bound.forward(&tape, xr)?;
    let f_fake = bound.forward(&tape, xf)?;
    let base = d_loss(&tape, config.objective, f_real, f_fake)?;

    let interp = sample_interpolations(real_batch, fake_batch, rng_interp)?;
    let outcome =
        apply_regularizer(&tape, |t, x| bound.forward(t, x), &interp.points, reg)?;
    let total = match outcome.term {
        Some(term) => tape.sub(base, term)?,
        None => base,
    };

    let grads = tape.backward(total, bound.param_ids())?;
    let mut params = model.params_mut();
    adam.step_with_lr(&mut params, &grads, lr)?;
    drop(params);

    match reg.kind {
        RegKind::Clip => clip_weights(model, reg.clip_bound)?,
        // The multiplier moves on the pre-update maximum norm.
        RegKind::MaxAl if update_multiplier => update_lambda(reg, outcome.g_max)?,
        _ => {}
    }
    Ok((tape.item(base), outcome.g_max))
}

/// Combined Lipschitz proxy: sampled gradient norms joined with the matched
/// difference quotients (both lower-bound the true constant; together they
/// dominate `dual / w1`, so weak duality holds under this normalization).
fn combined_estimate(
    model: &Mlp,
    real: &PointCloud,
    fake: &PointCloud,
    plan: &TransportPlan,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64, TrainError> {
    let grad_est = lipschitz_estimate(
        model.as_fn(),
        &real.to_tensor(),
        &fake.to_tensor(),
        samples,
        rng,
    )?;
    let quotient = matched_quotient_bound(model.as_fn(), plan, real, fake)?;
    Ok(grad_est.max(quotient))
}

/// Trains a critic to separate two fixed point clouds, recording one metrics
/// row per iteration. Gradient-alignment and matched-gap diagnostics run
/// every `eval_every` iterations and on the final one.
pub fn fit_discriminator(
    real: &PointCloud,
    fake: &PointCloud,
    config: &TrainConfig,
) -> Result<FitResult, TrainError> {
    config.validate()?;
    let (w1, plan) = exact_w1(real, fake)?;
    let plan_from_fake = plan.inverted();
    let mut rng_init = stream(config.seed, STREAM_INIT_D);
    let mut rng_batch = stream(config.seed, STREAM_BATCH);
    let mut rng_interp = stream(config.seed, STREAM_INTERP);
    let mut rng_est = stream(config.seed, STREAM_ESTIMATE);

    let mut model = build_critic(real.dim(), config, &mut rng_init)?;
    let mut reg = RegularizerState::new(&config.regularizer).map_err(TrainError::Reg)?;
    let mut adam = AdamState::new(config.adam(config.d_learning_rate), &model.params())?;
    let t_grid = segment_t_grid();

    let mut metrics: Vec<MetricsRecord> = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let lr = decayed_lr(config.d_learning_rate, config.decay, it, config.iterations);
        let batch_real: Vec<usize> =
            (0..config.batch_size).map(|_| rng_batch.gen_range(0..real.len())).collect();
        let batch_fake: Vec<usize> =
            (0..config.batch_size).map(|_| rng_batch.gen_range(0..fake.len())).collect();
        let real_batch = gather_rows(real, &batch_real);
        let fake_batch = gather_rows(fake, &batch_fake);

        let step = critic_step(
            &mut model,
            &mut adam,
            &mut reg,
            config,
            lr,
            &real_batch,
            &fake_batch,
            &mut rng_interp,
            (it + 1) % config.lambda_every == 0,
        );
        let (loss, g_max) = match step {
            Ok(v) => v,
            Err(TrainError::Tape(TapeError::NonFinite { op })) => {
                return Err(TrainError::NonFinite {
                    iteration: it as u64,
                    reason: format!("{op} produced a non-finite value"),
                    metrics,
                })
            }
            Err(TrainError::Nn(NnError::NonFiniteGradient { param_index })) => {
                return Err(TrainError::NonFinite {
                    iteration: it as u64,
                    reason: format!("gradient of parameter {param_index} is not finite"),
                    metrics,
                })
            }
            Err(other) => return Err(other),
        };
        if loss.abs() > DIVERGENCE_THRESHOLD {
            return Err(TrainError::Diverged { iteration: it as u64, value: loss, metrics });
        }

        let mut record = MetricsRecord::new(it as u64, loss);
        record.dual_objective = Some(dual_objective(model.as_fn(), real, fake)?);
        record.lipschitz_estimate =
            Some(combined_estimate(&model, real, fake, &plan, config.estimate_samples, &mut rng_est)?);
        record.g_max = Some(g_max);
        record.w1_oracle = Some(w1);
        if reg.kind == RegKind::MaxAl {
            record.lambda = Some(reg.lambda);
        }
        let mut stop_now = false;
        if it % config.eval_every == 0 || it + 1 == config.iterations {
            // Direction check runs from the fake side toward matched reals.
            let alignment =
                alignment_report(model.as_fn(), &plan_from_fake, fake, real, &t_grid)?;
            record.align_min_cosine = Some(alignment.min_cosine);
            record.align_mean_cosine = Some(alignment.mean_cosine);
            let scale = record.lipschitz_estimate.unwrap_or(0.0).max(1e-12);
            let gap = matched_gap_report(model.as_fn(), &plan, real, fake, scale)?;
            record.gap_max_residual = Some(gap.max_relative_residual);
            if let Some(threshold) = config.stop_min_cosine {
                stop_now = alignment.min_cosine >= threshold;
            }
        }
        metrics.push(record);
        if stop_now {
            break;
        }
    }
    Ok(FitResult { model, metrics, reg, w1, plan })
}

/// Supplies real data batches to the adversarial loop.
pub trait DataSampler {
    fn dim(&self) -> usize;
    /// `n` samples as an `[n, dim]` matrix, drawn from `rng`.
    fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Tensor;
}

/// Outcome of a full adversarial run.
pub struct GanOutcome {
    pub generator: Mlp,
    pub discriminator: Mlp,
    pub metrics: Vec<MetricsRecord>,
    /// Transport distance between the evaluation clouds before training.
    pub initial_w1: f64,
    /// Transport distance at the final evaluation.
    pub final_w1: f64,
    pub d_updates: u64,
    pub g_updates: u64,
}

/// Adversarial training: `d_steps` critic updates per generator update.
/// Progress is measured on fixed evaluation sets — 64 held-out real points
/// and 64 frozen prior draws — so the transport curve tracks the generator
/// and nothing else.
pub fn train_gan(config: &TrainConfig, data: &dyn DataSampler) -> Result<GanOutcome, TrainError> {
    config.validate()?;
    let dim = data.dim();
    let mut rng_init_d = stream(config.seed, STREAM_INIT_D);
    let mut rng_init_g = stream(config.seed, STREAM_INIT_G);
    let mut rng_batch = stream(config.seed, STREAM_BATCH);
    let mut rng_interp = stream(config.seed, STREAM_INTERP);
    let mut rng_est = stream(config.seed, STREAM_ESTIMATE);
    let mut rng_prior = stream(config.seed, STREAM_PRIOR);
    let mut rng_eval = stream(config.seed, STREAM_EVAL);

    let mut discriminator = build_critic(dim, config, &mut rng_init_d)?;
    let mut g_dims = vec![config.prior_dim];
    g_dims.extend_from_slice(&config.g_hidden);
    g_dims.push(dim);
    let mut generator = Mlp::new(
        &g_dims,
        Activation::LeakyRelu(config.leaky_slope),
        Activation::Tanh,
        &mut rng_init_g,
    )?;

    let mut reg = RegularizerState::new(&config.regularizer).map_err(TrainError::Reg)?;
    let mut adam_d = AdamState::new(config.adam(config.d_learning_rate), &discriminator.params())?;
    let mut adam_g = AdamState::new(config.adam(config.g_learning_rate), &generator.params())?;

    let eval_real = tensor_to_cloud(&data.sample(64, &mut rng_eval));
    let z_eval = standard_normal_matrix(64, config.prior_dim, &mut rng_eval);
    let fake_eval = tensor_to_cloud(&generate(&generator, &z_eval)?);
    let (initial_w1, _) = exact_w1(&eval_real, &fake_eval)?;
    let mut final_w1 = initial_w1;

    let mut d_updates = 0u64;
    let mut g_updates = 0u64;
    let mut metrics: Vec<MetricsRecord> = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let d_lr = decayed_lr(config.d_learning_rate, config.decay, it, config.iterations);
        let g_lr = decayed_lr(config.g_learning_rate, config.decay, it, config.iterations);

        let mut last_loss = 0.0;
        let mut last_g_max = 0.0;
        for s in 0..config.d_steps {
            let real_batch = data.sample(config.batch_size, &mut rng_batch);
            let z = standard_normal_matrix(config.batch_size, config.prior_dim, &mut rng_prior);
            let fake_batch = generate(&generator, &z)?;
            // The multiplier moves once per outer iteration, after that
            // iteration's critic steps.
            let step = critic_step(
                &mut discriminator,
                &mut adam_d,
                &mut reg,
                config,
                d_lr,
                &real_batch,
                &fake_batch,
                &mut rng_interp,
                s + 1 == config.d_steps && (it + 1) % config.lambda_every == 0,
            );
            let (loss, g_max) = match step {
                Ok(v) => v,
                Err(TrainError::Tape(TapeError::NonFinite { op })) => {
                    return Err(TrainError::NonFinite {
                        iteration: it as u64,
                        reason: format!("{op} produced a non-finite value"),
                        metrics,
                    })
                }
                Err(other) => return Err(other),
            };
            if loss.abs() > DIVERGENCE_THRESHOLD {
                return Err(TrainError::Diverged { iteration: it as u64, value: loss, metrics });
            }
            last_loss = loss;
            last_g_max = g_max;
            d_updates += 1;
        }

        // Generator update: differentiate the critic's view of G(z) with
        // respect to the generator parameters only.
        let tape = Tape::new();
        let bound_g = generator.bind(&tape)?;
        let z = standard_normal_matrix(config.batch_size, config.prior_dim, &mut rng_prior);
        let zn = tape.constant(z);
        let xg = bound_g.forward(&tape, zn)?;
        let bound_d = discriminator.bind_eval(&tape)?;
        let f_fake = bound_d.forward(&tape, xg)?;
        let gl = g_loss(&tape, config.objective, f_fake)?;
        let g_loss_value = tape.item(gl);
        if g_loss_value.abs() > DIVERGENCE_THRESHOLD {
            return Err(TrainError::Diverged {
                iteration: it as u64,
                value: g_loss_value,
                metrics,
            });
        }
        let grads = tape.backward(gl, bound_g.param_ids())?;
        let mut g_params = generator.params_mut();
        adam_g.step_with_lr(&mut g_params, &grads, g_lr)?;
        drop(g_params);
        g_updates += 1;

        let mut record = MetricsRecord::new(it as u64, last_loss);
        record.g_loss = Some(g_loss_value);
        record.g_max = Some(last_g_max);
        if reg.kind == RegKind::MaxAl {
            record.lambda = Some(reg.lambda);
        }
        if it % config.eval_every == 0 || it + 1 == config.iterations {
            let fake_now = tensor_to_cloud(&generate(&generator, &z_eval)?);
            let (w1, plan) = exact_w1(&eval_real, &fake_now)?;
            final_w1 = w1;
            record.w1_oracle = Some(w1);
            record.dual_objective =
                Some(dual_objective(discriminator.as_fn(), &eval_real, &fake_now)?);
            record.lipschitz_estimate = Some(combined_estimate(
                &discriminator,
                &eval_real,
                &fake_now,
                &plan,
                config.estimate_samples,
                &mut rng_est,
            )?);
        }
        metrics.push(record);
    }

    Ok(GanOutcome {
        generator,
        discriminator,
        metrics,
        initial_w1,
        final_w1,
        d_updates,
        g_updates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outputs(tape: &Tape, values: &[f64]) -> NodeId {
        tape.constant(Tensor::matrix(values.len(), 1, values.to_vec()).unwrap())
    }

    #[test]
    fn wgan_d_loss_is_mean_gap() {
        let tape = Tape::new();
        let fr = outputs(&tape, &[1.0, 3.0]);
        let ff = outputs(&tape, &[0.0, 2.0]);
        let loss = d_loss(&tape, ObjectiveKind::Wgan, fr, ff).unwrap();
        assert_eq!(tape.item(loss), -1.0);
    }

    #[test]
    fn hinge_d_loss_matches_hand_computation() {
        // relu(1 - 0.5) + relu(1 + (-0.3)) = 0.5 + 0.7.
        let tape = Tape::new();
        let fr = outputs(&tape, &[0.5]);
        let ff = outputs(&tape, &[-0.3]);
        let loss = d_loss(&tape, ObjectiveKind::Hinge, fr, ff).unwrap();
        assert!((tape.item(loss) - 1.2).abs() < 1e-12);
    }

    #[test]
    fn vanilla_losses_at_zero_critic_output() {
        // softplus(0) = ln 2 on each side: d-loss ln 4, g-loss ln 2.
        let tape = Tape::new();
        let fr = outputs(&tape, &[0.0]);
        let ff = outputs(&tape, &[0.0]);
        let dl = d_loss(&tape, ObjectiveKind::Vanilla, fr, ff).unwrap();
        assert!((tape.item(dl) - 4.0f64.ln()).abs() < 1e-12);
        let gl = g_loss(&tape, ObjectiveKind::Vanilla, ff).unwrap();
        assert!((tape.item(gl) - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn wgan_g_loss_is_negated_mean() {
        let tape = Tape::new();
        let ff = outputs(&tape, &[0.5, 1.5]);
        let gl = g_loss(&tape, ObjectiveKind::Wgan, ff).unwrap();
        assert_eq!(tape.item(gl), -1.0);
    }

    #[test]
    fn step_halving_decays_at_quarters() {
        let base = 1.0;
        let total = 100;
        assert_eq!(decayed_lr(base, DecaySchedule::StepHalving, 0, total), 1.0);
        assert_eq!(decayed_lr(base, DecaySchedule::StepHalving, 24, total), 1.0);
        assert_eq!(decayed_lr(base, DecaySchedule::StepHalving, 25, total), 0.5);
        assert_eq!(decayed_lr(base, DecaySchedule::StepHalving, 50, total), 0.25);
        assert_eq!(decayed_lr(base, DecaySchedule::StepHalving, 75, total), 0.125);
        assert_eq!(decayed_lr(base, DecaySchedule::StepHalving, 99, total), 0.125);
        assert_eq!(decayed_lr(base, DecaySchedule::Constant, 99, total), 1.0);
    }

    fn line_clouds() -> (PointCloud, PointCloud) {
        let real = PointCloud::new(vec![vec![2.0]]).unwrap();
        let fake = PointCloud::new(vec![vec![0.0]]).unwrap();
        (real, fake)
    }

    fn quick_config(kind: RegKind) -> TrainConfig {
        TrainConfig {
            iterations: 40,
            batch_size: 4,
            d_hidden: vec![8, 8],
            estimate_samples: 16,
            eval_every: 10,
            regularizer: RegConfig { kind, rho: 10.0, ..RegConfig::default() },
            seed: 7,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn fit_produces_one_record_per_iteration_in_order() {
        let (real, fake) = line_clouds();
        let result = fit_discriminator(&real, &fake, &quick_config(RegKind::Gp)).unwrap();
        assert_eq!(result.metrics.len(), 40);
        for (i, rec) in result.metrics.iter().enumerate() {
            assert_eq!(rec.iteration, i as u64);
            assert!(rec.is_finite());
            assert_eq!(rec.w1_oracle, Some(2.0));
        }
        // Diagnostics run on the cadence and at the end.
        assert!(result.metrics[0].align_min_cosine.is_some());
        assert!(result.metrics[1].align_min_cosine.is_none());
        assert!(result.metrics[39].align_min_cosine.is_some());
    }

    #[test]
    fn fit_is_deterministic_for_a_fixed_seed() {
        let (real, fake) = line_clouds();
        let a = fit_discriminator(&real, &fake, &quick_config(RegKind::MaxGp)).unwrap();
        let b = fit_discriminator(&real, &fake, &quick_config(RegKind::MaxGp)).unwrap();
        for (ra, rb) in a.metrics.iter().zip(&b.metrics) {
            assert_eq!(ra.d_loss, rb.d_loss);
            assert_eq!(ra.lipschitz_estimate, rb.lipschitz_estimate);
            assert_eq!(ra.g_max, rb.g_max);
        }
        for (pa, pb) in a.model.params().iter().zip(b.model.params()) {
            assert_eq!(*pa, &pb.clone());
        }
    }

    #[test]
    fn fit_weak_duality_holds_on_every_row() {
        let (real, fake) = line_clouds();
        let result = fit_discriminator(&real, &fake, &quick_config(RegKind::Gp)).unwrap();
        for rec in &result.metrics {
            let dual = rec.dual_objective.unwrap();
            let k = rec.lipschitz_estimate.unwrap();
            if k > 0.0 {
                assert!(
                    dual / k <= result.w1 + 1e-6,
                    "iteration {}: {} > {}",
                    rec.iteration,
                    dual / k,
                    result.w1
                );
            }
        }
    }

    #[test]
    fn fit_aborts_on_divergence_keeping_partial_metrics() {
        let (real, fake) = line_clouds();
        let mut config = quick_config(RegKind::None);
        config.iterations = 3000;
        config.d_learning_rate = 1e5; // deliberately unstable
        config.decay = DecaySchedule::Constant;
        match fit_discriminator(&real, &fake, &config) {
            Err(TrainError::Diverged { iteration, metrics, .. }) => {
                assert_eq!(metrics.len(), iteration as usize);
            }
            Err(TrainError::NonFinite { iteration, metrics, .. }) => {
                assert_eq!(metrics.len(), iteration as usize);
            }
            other => panic!("expected an abort, got {:?}", other.map(|_| "success")),
        }
    }

    struct FixedCloudSampler {
        cloud: PointCloud,
    }

    impl DataSampler for FixedCloudSampler {
        fn dim(&self) -> usize {
            self.cloud.dim()
        }

        fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Tensor {
            let indices: Vec<usize> = (0..n).map(|_| rng.gen_range(0..self.cloud.len())).collect();
            gather_rows(&self.cloud, &indices)
        }
    }

    #[test]
    fn gan_alternation_bookkeeping_and_metrics_shape() {
        let sampler = FixedCloudSampler {
            cloud: PointCloud::new(vec![vec![0.5, 0.5], vec![-0.5, -0.5]]).unwrap(),
        };
        let config = TrainConfig {
            iterations: 6,
            d_steps: 3,
            batch_size: 4,
            d_hidden: vec![8],
            g_hidden: vec![8],
            prior_dim: 2,
            estimate_samples: 8,
            eval_every: 2,
            regularizer: RegConfig { kind: RegKind::Gp, rho: 10.0, ..RegConfig::default() },
            ..TrainConfig::default()
        };
        let outcome = train_gan(&config, &sampler).unwrap();
        assert_eq!(outcome.metrics.len(), 6);
        assert_eq!(outcome.d_updates, 18);
        assert_eq!(outcome.g_updates, 6);
        assert!(outcome.metrics[0].w1_oracle.is_some());
        assert!(outcome.metrics[1].w1_oracle.is_none());
        assert!(outcome.metrics[5].w1_oracle.is_some());
        assert!(outcome.initial_w1.is_finite());
        assert!(outcome.final_w1.is_finite());
    }

    #[test]
    fn gan_is_deterministic_for_a_fixed_seed() {
        let sampler = FixedCloudSampler {
            cloud: PointCloud::new(vec![vec![0.3, -0.1], vec![-0.4, 0.2]]).unwrap(),
        };
        let config = TrainConfig {
            iterations: 4,
            d_steps: 2,
            batch_size: 4,
            d_hidden: vec![8],
            g_hidden: vec![8],
            prior_dim: 2,
            estimate_samples: 8,
            eval_every: 2,
            seed: 13,
            ..TrainConfig::default()
        };
        let a = train_gan(&config, &sampler).unwrap();
        let b = train_gan(&config, &sampler).unwrap();
        assert_eq!(a.initial_w1, b.initial_w1);
        assert_eq!(a.final_w1, b.final_w1);
        for (ra, rb) in a.metrics.iter().zip(&b.metrics) {
            assert_eq!(ra.d_loss, rb.d_loss);
            assert_eq!(ra.g_loss, rb.g_loss);
        }
    }
}
