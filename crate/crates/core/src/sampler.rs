//! Ancestral sampling with classifier-free guidance.

use alloc::format;
use alloc::vec;

use crate::denoiser::{Denoiser, DenoiserParams};
use crate::error::{invalid, mismatch, Result};
use crate::rng::{self, Stream};
use crate::schedule::Schedule;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleRequest {
    pub class_index: usize,
    pub guidance_scale: f64,
    pub count: usize,
    pub seed: u64,
    pub use_ema: bool,
}

/// The two weight sets a trained model carries.
#[derive(Debug, Clone, Copy)]
pub struct Weights<'a> {
    pub raw: &'a DenoiserParams,
    pub ema: &'a DenoiserParams,
}

impl<'a> Weights<'a> {
    pub fn select(&self, use_ema: bool) -> &'a DenoiserParams {
        if use_ema {
            self.ema
        } else {
            self.raw
        }
    }
}

/// Guided noise estimate `eps_cond + w * (eps_cond - eps_uncond)`.
pub fn cfg_combine(eps_cond: &Tensor, eps_uncond: &Tensor, w: f64) -> Result<Tensor> {
    if !w.is_finite() {
        return Err(invalid("cfg_combine", format!("guidance scale {w} is not finite")));
    }
    eps_cond
        .zip_with(eps_uncond, |c, u| c + w * (c - u))
        .map_err(|_| mismatch("cfg_combine", eps_cond.shape(), eps_uncond.shape()))
}

/// How the noise estimate is formed at each step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Guidance {
    /// Conditional and unconditional passes combined with scale `w`.
    ClassifierFree(f64),
    /// Conditional pass only.
    ConditionalOnly,
}

/// The sampling loop over an arbitrary noise predictor
/// `predict(x_t, t, class) -> eps_hat`.
///
/// Draw order from the seeded stream: `x_T`, then one injected-noise tensor
/// per step for `t = T..2`.
pub fn sample_with<F>(
    mut predict: F,
    image_shape: [usize; 3],
    null_class: usize,
    schedule: &Schedule,
    class_index: usize,
    guidance: Guidance,
    count: usize,
    seed: u64,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize, usize) -> Result<Tensor>,
{
    if count == 0 {
        return Err(invalid("sample", "count must be positive"));
    }
    let shape = [count, image_shape[0], image_shape[1], image_shape[2]];
    let mut rng = rng::seeded(seed, Stream::Sample);
    let mut x = rng::normal_tensor(&mut rng, &shape);
    let zeros = Tensor::zeros(&shape);
    for t in (1..=schedule.steps()).rev() {
        let eps_c = predict(&x, t, class_index)?;
        let eps = match guidance {
            Guidance::ClassifierFree(w) => {
                let eps_u = predict(&x, t, null_class)?;
                cfg_combine(&eps_c, &eps_u, w)?
            }
            Guidance::ConditionalOnly => eps_c,
        };
        let z = if t > 1 {
            rng::normal_tensor(&mut rng, &shape)
        } else {
            zeros.clone()
        };
        x = schedule.reverse_step(&x, t, &eps, &z)?;
    }
    for v in x.data_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
    Ok(x)
}

fn check_request(net: &Denoiser, req: &SampleRequest) -> Result<()> {
    let c = net.config();
    if req.class_index >= c.null_class() {
        return Err(invalid(
            "sample",
            format!(
                "class {} is not a real class (valid 0..{}, {} is the null condition)",
                req.class_index,
                c.null_class(),
                c.null_class()
            ),
        ));
    }
    if !(req.guidance_scale.is_finite() && req.guidance_scale >= 0.0) {
        return Err(invalid(
            "sample",
            format!("guidance scale must be finite and >= 0, got {}", req.guidance_scale),
        ));
    }
    Ok(())
}

fn predictor<'a>(
    net: &'a Denoiser,
    params: &'a DenoiserParams,
) -> impl FnMut(&Tensor, usize, usize) -> Result<Tensor> + 'a {
    move |x: &Tensor, t: usize, class: usize| {
        let b = x.shape()[0];
        net.predict(params, x, &vec![t; b], &vec![class; b])
    }
}

/// Generates `req.count` images of class `req.class_index`, in `[-1, 1]`,
/// evaluating both the conditional and the null-conditioned network at
/// every step.
pub fn sample(net: &Denoiser, weights: Weights<'_>, schedule: &Schedule, req: &SampleRequest) -> Result<Tensor> {
    check_request(net, req)?;
    let params = weights.select(req.use_ema);
    net.check_params(params)?;
    let c = net.config();
    sample_with(
        predictor(net, params),
        c.image_shape(),
        c.null_class(),
        schedule,
        req.class_index,
        Guidance::ClassifierFree(req.guidance_scale),
        req.count,
        req.seed,
    )
}

/// Like [`sample`] but skips the unconditional pass; the guidance scale in
/// `req` is ignored. Equals [`sample`] with `w = 0`.
pub fn sample_conditional(
    net: &Denoiser,
    weights: Weights<'_>,
    schedule: &Schedule,
    req: &SampleRequest,
) -> Result<Tensor> {
    check_request(net, req)?;
    let params = weights.select(req.use_ema);
    net.check_params(params)?;
    let c = net.config();
    sample_with(
        predictor(net, params),
        c.image_shape(),
        c.null_class(),
        schedule,
        req.class_index,
        Guidance::ConditionalOnly,
        req.count,
        req.seed,
    )
}
