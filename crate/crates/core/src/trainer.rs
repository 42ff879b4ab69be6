//! Noise-prediction training: MSE loss with conditioning dropout, AdamW,
//! and a per-batch exponential moving average of the weights.
//!
//! All randomness comes from one generator seeded by [`TrainConfig::seed`].
//! Per epoch the sample order is shuffled first; then for every batch the
//! draws are, in order: one timestep per sample, the noise tensor, and one
//! dropout draw per sample.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Op, Tape, Var};
use crate::denoiser::{Denoiser, DenoiserParams};
use crate::error::{invalid, Error, Result};
use crate::math;
use crate::params::ParamSet;
use crate::rng::{self, Rng, Stream};
use crate::schedule::Schedule;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub ema_alpha: f64,
    pub p_uncond: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            ema_alpha: 0.995,
            p_uncond: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::InvalidConfig(format!("{key}: {why}")));
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", "must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) {
            return bad("adam_beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam_beta2", "must lie in [0, 1)");
        }
        if !(self.adam_epsilon > 0.0) {
            return bad("adam_epsilon", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return bad("ema_alpha", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return bad("p_uncond", "must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Adam moments and step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay:
/// `θ ← θ − lr·(m̂/(√v̂ + ε) + λ·θ)`.
pub fn adamw_step(params: &mut ParamSet, grads: &ParamSet, state: &mut OptimizerState, cfg: &TrainConfig) -> Result<()> {
    params.check_aligned(grads)?;
    params.check_aligned(&state.m)?;
    for (name, g) in grads.iter() {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let bc1 = 1.0 - math::powf(b1, t);
    let bc2 = 1.0 - math::powf(b2, t);
    let (lr, wd, eps) = (cfg.learning_rate, cfg.weight_decay, cfg.adam_epsilon);
    let tensors = params
        .tensors_mut()
        .iter_mut()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut().iter_mut().zip(state.v.tensors_mut().iter_mut()));
    for ((p, g), (m, v)) in tensors {
        let it = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
        for ((theta, &gi), (mi, vi)) in it {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *theta -= lr * (m_hat / (math::sqrt(v_hat) + eps) + wd * *theta);
        }
    }
    Ok(())
}

/// Shadow weights `θ_EMA ← α·θ_EMA + (1 − α)·θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub shadow: ParamSet,
    pub alpha: f64,
}

impl EmaState {
    pub fn new(initial: &ParamSet, alpha: f64) -> Self {
        Self {
            shadow: initial.clone(),
            alpha,
        }
    }
}

pub fn ema_update(ema: &mut EmaState, params: &ParamSet) -> Result<()> {
    ema.shadow.check_aligned(params)?;
    let a = ema.alpha;
    for (s, p) in ema.shadow.tensors_mut().iter_mut().zip(params.tensors()) {
        for (sv, &pv) in s.data_mut().iter_mut().zip(p.data()) {
            *sv = a * *sv + (1.0 - a) * pv;
        }
    }
    Ok(())
}

/// The random quantities of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchDraws {
    pub timesteps: Vec<usize>,
    pub noise: Tensor,
    /// Labels after conditioning dropout.
    pub cond: Vec<usize>,
}

/// Draws timesteps, noise and conditioning dropout, in that order.
pub fn draw_batch(
    rng: &mut Rng,
    labels: &[usize],
    image_shape: [usize; 3],
    steps: usize,
    p_uncond: f64,
    null_class: usize,
) -> BatchDraws {
    let b = labels.len();
    let timesteps = (0..b).map(|_| rng::int_inclusive(rng, 1, steps)).collect();
    let noise = rng::normal_tensor(rng, &[b, image_shape[0], image_shape[1], image_shape[2]]);
    let cond = labels
        .iter()
        .map(|&l| if rng::unit(rng) < p_uncond { null_class } else { l })
        .collect();
    BatchDraws {
        timesteps,
        noise,
        cond,
    }
}

/// Noised inputs `x_t` for a batch of clean images under the given draws.
pub fn noised_batch(images: &Tensor, draws: &BatchDraws, schedule: &Schedule) -> Result<Tensor> {
    if images.shape() != draws.noise.shape() {
        return Err(crate::error::mismatch("diffusion_loss", images.shape(), draws.noise.shape()));
    }
    let b = images.shape()[0];
    let per = images.len() / b;
    let mut out = Vec::with_capacity(images.len());
    for (i, &t) in draws.timesteps.iter().enumerate() {
        if t == 0 || t > schedule.steps() {
            return Err(invalid("diffusion_loss", format!("timestep {t} out of range")));
        }
        let ab = schedule.alpha_bar(t);
        let (sa, sb) = (math::sqrt(ab), math::sqrt(1.0 - ab));
        let x0 = &images.data()[i * per..(i + 1) * per];
        let e = &draws.noise.data()[i * per..(i + 1) * per];
        out.extend(x0.iter().zip(e).map(|(x, e)| sa * x + sb * e));
    }
    Tensor::new(images.shape().to_vec(), out)
}

/// Mean squared error between a predictor's output and the drawn noise.
///
/// `predict(graph, x_t, timesteps, cond)` returns the noise estimate.
pub fn diffusion_loss<G, F>(
    g: &mut G,
    images: &Tensor,
    draws: &BatchDraws,
    schedule: &Schedule,
    mut predict: F,
) -> Result<G::Value>
where
    G: Graph,
    F: FnMut(&mut G, &G::Value, &[usize], &[usize]) -> Result<G::Value>,
{
    if images.rank() != 4 {
        return Err(invalid("diffusion_loss", format!("expected (B, C, H, W) images, got {:?}", images.shape())));
    }
    let x_t = noised_batch(images, draws, schedule)?;
    let x_t = g.constant(x_t);
    let pred = predict(g, &x_t, &draws.timesteps, &draws.cond)?;
    let neg_noise = g.constant(draws.noise.map(|v| -v));
    let diff = g.apply(Op::Add, &[&pred, &neg_noise])?;
    let sq = g.apply(Op::Mul, &[&diff, &diff])?;
    let total = g.apply(Op::Sum, &[&sq])?;
    g.apply(Op::Scale(1.0 / images.len() as f64), &[&total])
}

/// Clean images with their class labels.
#[derive(Debug, Clone, Copy)]
pub struct TrainingData<'a> {
    pub images: &'a [Tensor],
    pub labels: &'a [usize],
}

impl TrainingData<'_> {
    fn validate(&self, net: &Denoiser) -> Result<()> {
        if self.images.is_empty() {
            return Err(invalid("train", "dataset is empty"));
        }
        if self.images.len() != self.labels.len() {
            return Err(invalid(
                "train",
                format!("{} images but {} labels", self.images.len(), self.labels.len()),
            ));
        }
        let shape = net.config().image_shape();
        for (img, &l) in self.images.iter().zip(self.labels) {
            if img.shape() != shape {
                return Err(crate::error::mismatch("train", img.shape(), &shape));
            }
            if l >= net.config().null_class() {
                return Err(invalid("train", format!("label {l} is not a real class")));
            }
        }
        Ok(())
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: DenoiserParams,
    pub ema: EmaState,
    pub optimizer: OptimizerState,
    /// One entry per batch, in order.
    pub losses: Vec<f64>,
    pub batches_per_epoch: usize,
}

impl TrainOutcome {
    /// Mean batch loss of each epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        self.losses
            .chunks(self.batches_per_epoch.max(1))
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }
}

/// One optimization step on one batch. Returns the batch loss.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    net: &Denoiser,
    schedule: &Schedule,
    params: &mut DenoiserParams,
    opt: &mut OptimizerState,
    ema: &mut EmaState,
    cfg: &TrainConfig,
    images: &Tensor,
    draws: &BatchDraws,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.tensors().iter().map(|p| tape.param(p.clone())).collect();
    let shape = images.shape().to_vec();
    let loss = diffusion_loss(&mut tape, images, draws, schedule, |g, x, t, c| {
        net.forward(g, &vars, x, &shape, t, c)
    })?;
    let value = tape.value(loss)?.item().unwrap_or(f64::NAN);
    if !value.is_finite() {
        return Err(Error::NonFinite("loss".to_string()));
    }
    let mut grads = tape.backward(loss)?;
    let entries = params
        .iter()
        .zip(&vars)
        .map(|((name, p), &v)| {
            let g = grads.take(v).unwrap_or_else(|_| Tensor::zeros(p.shape()));
            (name.into(), g)
        })
        .collect();
    let grads = ParamSet::new(entries)?;
    drop(tape);
    adamw_step(params, &grads, opt, cfg)?;
    ema_update(ema, params)?;
    Ok(value)
}

/// Full training run from freshly initialized weights.
///
/// `on_batch(global_batch_index, loss)` is called after every update.
pub fn train(
    net: &Denoiser,
    schedule: &Schedule,
    cfg: &TrainConfig,
    data: TrainingData<'_>,
    mut on_batch: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.validate(net)?;
    let mut params = net.init_params(cfg.seed);
    let mut opt = OptimizerState::new(&params);
    let mut ema = EmaState::new(&params, cfg.ema_alpha);
    let mut rng = rng::seeded(cfg.seed, Stream::Train);
    let c = *net.config();
    let n = data.images.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let mut losses = Vec::with_capacity(cfg.epochs * batches_per_epoch);
    let mut order: Vec<usize> = (0..n).collect();
    for _epoch in 0..cfg.epochs {
        rng::shuffle(&mut rng, &mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let batch_index = losses.len();
            let imgs: Vec<Tensor> = chunk.iter().map(|&i| data.images[i].clone()).collect();
            let images = Tensor::stack(&imgs)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let draws = draw_batch(
                &mut rng,
                &labels,
                c.image_shape(),
                schedule.steps(),
                cfg.p_uncond,
                c.null_class(),
            );
            let loss = train_step(net, schedule, &mut params, &mut opt, &mut ema, cfg, &images, &draws)
                .map_err(|e| match e {
                    Error::NonFinite(what) => Error::NonFinite(format!("{what} at batch {batch_index}")),
                    other => other,
                })?;
            losses.push(loss);
            on_batch(batch_index, loss);
        }
    }
    Ok(TrainOutcome {
        params,
        ema,
        optimizer: opt,
        losses,
        batches_per_epoch,
    })
}
