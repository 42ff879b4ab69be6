//! Linear-beta DDPM noise schedule with the forward (noising) and reverse
//! (ancestral) steps.
//!
//! Timesteps are 1-based: `alpha_bar(0) == 1` is the clean image and
//! `alpha_bar(T)` the most corrupted one.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{invalid, mismatch, Result};
use crate::math;
use crate::tensor::Tensor;

pub const DEFAULT_STEPS: usize = 200;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Precomputed `beta`, `alpha = 1 - beta` and cumulative `alpha_bar` tables.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    // index 0 is unused padding so that `beta[t]` reads naturally
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl Schedule {
    /// Linear interpolation of beta from `beta_start` at `t = 1` to
    /// `beta_end` at `t = steps`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("build_schedule", "step count must be at least 1"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(invalid(
                "build_schedule",
                format!("need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"),
            ));
        }
        let mut beta = Vec::with_capacity(steps + 1);
        let mut alpha = Vec::with_capacity(steps + 1);
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        beta.push(0.0);
        alpha.push(1.0);
        alpha_bar.push(1.0);
        for t in 1..=steps {
            let b = if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * (t - 1) as f64 / (steps - 1) as f64
            };
            beta.push(b);
            alpha.push(1.0 - b);
            alpha_bar.push(alpha_bar[t - 1] * (1.0 - b));
        }
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    /// Defined for `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, op: &'static str, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(invalid(op, format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// `sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * noise`.
    pub fn forward_noise(&self, x0: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor> {
        self.check_t("forward_noise", t)?;
        if x0.shape() != noise.shape() {
            return Err(mismatch("forward_noise", x0.shape(), noise.shape()));
        }
        let ab = self.alpha_bar[t];
        Ok(noise_with(x0, noise, ab))
    }

    /// Inverts [`Schedule::forward_noise`] for a predicted noise, clamped to
    /// the `[-1, 1]` pixel range.
    pub fn predict_x0(&self, x_t: &Tensor, t: usize, eps_hat: &Tensor) -> Result<Tensor> {
        let mut x0 = self.predict_x0_unclamped(x_t, t, eps_hat)?;
        for v in x0.data_mut() {
            *v = v.clamp(-1.0, 1.0);
        }
        Ok(x0)
    }

    pub fn predict_x0_unclamped(&self, x_t: &Tensor, t: usize, eps_hat: &Tensor) -> Result<Tensor> {
        self.check_t("predict_x0", t)?;
        let ab = self.alpha_bar[t];
        if ab <= 0.0 {
            return Err(invalid("predict_x0", format!("alpha_bar[{t}] is zero")));
        }
        let (a, b) = (math::sqrt(ab), math::sqrt(1.0 - ab));
        x_t.zip_with(eps_hat, |x, e| (x - b * e) / a)
            .map_err(|_| mismatch("predict_x0", x_t.shape(), eps_hat.shape()))
    }

    /// Ancestral step `x_{t-1} = mu_t + sigma_t * z` with `sigma_t^2 = beta[t]`;
    /// `z` is ignored at `t = 1`.
    pub fn reverse_step(&self, x_t: &Tensor, t: usize, eps_hat: &Tensor, injected: &Tensor) -> Result<Tensor> {
        self.check_t("reverse_step", t)?;
        if x_t.shape() != eps_hat.shape() {
            return Err(mismatch("reverse_step", x_t.shape(), eps_hat.shape()));
        }
        if x_t.shape() != injected.shape() {
            return Err(mismatch("reverse_step", x_t.shape(), injected.shape()));
        }
        let mean = posterior_mean(x_t, eps_hat, self.beta[t], self.alpha[t], self.alpha_bar[t]);
        if t == 1 {
            return Ok(mean);
        }
        let sigma = math::sqrt(self.beta[t]);
        mean.zip_with(injected, |m, z| m + sigma * z)
    }
}

/// The closed-form forward marginal for an explicit `alpha_bar`.
pub fn noise_with(x0: &Tensor, noise: &Tensor, alpha_bar: f64) -> Tensor {
    let (a, b) = (math::sqrt(alpha_bar), math::sqrt(1.0 - alpha_bar));
    x0.zip_with(noise, |x, e| a * x + b * e)
        .expect("caller checked shapes")
}

/// `(1/sqrt(alpha)) * (x_t - beta / sqrt(1 - alpha_bar) * eps_hat)`.
pub fn posterior_mean(x_t: &Tensor, eps_hat: &Tensor, beta: f64, alpha: f64, alpha_bar: f64) -> Tensor {
    let coef = beta / math::sqrt(1.0 - alpha_bar);
    let scale = 1.0 / math::sqrt(alpha);
    x_t.zip_with(eps_hat, |x, e| scale * (x - coef * e))
        .expect("caller checked shapes")
}

impl Default for Schedule {
    fn default() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule is valid")
    }
}
