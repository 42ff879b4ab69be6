//! The flat `key = value` run configuration.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! ignored. Every key is optional and falls back to its default, but unknown
//! and repeated keys are errors.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use diffusion_core::dataset::MAX_CLASSES;
use diffusion_core::trainer::TrainConfig;
use diffusion_core::{schedule, DenoiserConfig, Schedule};

use crate::error::{io_err, CliError, Result};

/// Sampling and evaluation defaults.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleDefaults {
    pub guidance_scale: f64,
    pub use_ema: bool,
    /// Images generated per class by `eval`.
    pub samples_per_class: usize,
    pub projector_seed: u64,
    pub feature_dim: usize,
}

/// Parameters of the procedural training set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetParams {
    pub per_class: usize,
    pub seed: u64,
    /// Side length images are rendered at before resizing to `image_size`.
    pub render_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunConfig {
    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleParams,
    pub sample: SampleDefaults,
    pub dataset: DatasetParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            denoiser: DenoiserConfig::default(),
            train: TrainConfig::default(),
            schedule: ScheduleParams {
                steps: schedule::DEFAULT_STEPS,
                beta_start: schedule::DEFAULT_BETA_START,
                beta_end: schedule::DEFAULT_BETA_END,
            },
            sample: SampleDefaults {
                guidance_scale: 3.0,
                use_ema: true,
                samples_per_class: 16,
                projector_seed: 0,
                feature_dim: diffusion_core::metrics::DEFAULT_FEATURE_DIM,
            },
            dataset: DatasetParams {
                per_class: 256,
                seed: 0,
                render_size: 16,
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("{key}: cannot parse `{value}`")))
}

impl RunConfig {
    /// Real classes in the dataset; the denoiser adds the null class.
    pub fn real_classes(&self) -> usize {
        self.denoiser.num_classes - 1
    }

    pub fn build_schedule(&self) -> Result<Schedule> {
        let s = &self.schedule;
        Schedule::linear(s.steps, s.beta_start, s.beta_end)
            .map_err(|e| CliError::Config(format!("steps/beta_start/beta_end: {e}")))
    }

    /// Keys and rendered values in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (d, t, s, p, ds) = (&self.denoiser, &self.train, &self.schedule, &self.sample, &self.dataset);
        vec![
            ("image_size", d.image_size.to_string()),
            ("channels", d.channels.to_string()),
            ("base_width", d.base_width.to_string()),
            ("depth", d.depth.to_string()),
            ("embed_dim", d.embed_dim.to_string()),
            ("num_classes", d.num_classes.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("adam_beta1", t.adam_beta1.to_string()),
            ("adam_beta2", t.adam_beta2.to_string()),
            ("adam_epsilon", t.adam_epsilon.to_string()),
            ("ema_alpha", t.ema_alpha.to_string()),
            ("p_uncond", t.p_uncond.to_string()),
            ("seed", t.seed.to_string()),
            ("steps", s.steps.to_string()),
            ("beta_start", s.beta_start.to_string()),
            ("beta_end", s.beta_end.to_string()),
            ("guidance_scale", p.guidance_scale.to_string()),
            ("use_ema", p.use_ema.to_string()),
            ("samples_per_class", p.samples_per_class.to_string()),
            ("projector_seed", p.projector_seed.to_string()),
            ("feature_dim", p.feature_dim.to_string()),
            ("per_class", ds.per_class.to_string()),
            ("dataset_seed", ds.seed.to_string()),
            ("render_size", ds.render_size.to_string()),
        ]
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "image_size" => self.denoiser.image_size = parse(key, v)?,
            "channels" => self.denoiser.channels = parse(key, v)?,
            "base_width" => self.denoiser.base_width = parse(key, v)?,
            "depth" => self.denoiser.depth = parse(key, v)?,
            "embed_dim" => self.denoiser.embed_dim = parse(key, v)?,
            "num_classes" => self.denoiser.num_classes = parse(key, v)?,
            "epochs" => self.train.epochs = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "learning_rate" => self.train.learning_rate = parse(key, v)?,
            "weight_decay" => self.train.weight_decay = parse(key, v)?,
            "adam_beta1" => self.train.adam_beta1 = parse(key, v)?,
            "adam_beta2" => self.train.adam_beta2 = parse(key, v)?,
            "adam_epsilon" => self.train.adam_epsilon = parse(key, v)?,
            "ema_alpha" => self.train.ema_alpha = parse(key, v)?,
            "p_uncond" => self.train.p_uncond = parse(key, v)?,
            "seed" => self.train.seed = parse(key, v)?,
            "steps" => self.schedule.steps = parse(key, v)?,
            "beta_start" => self.schedule.beta_start = parse(key, v)?,
            "beta_end" => self.schedule.beta_end = parse(key, v)?,
            "guidance_scale" => self.sample.guidance_scale = parse(key, v)?,
            "use_ema" => self.sample.use_ema = parse(key, v)?,
            "samples_per_class" => self.sample.samples_per_class = parse(key, v)?,
            "projector_seed" => self.sample.projector_seed = parse(key, v)?,
            "feature_dim" => self.sample.feature_dim = parse(key, v)?,
            "per_class" => self.dataset.per_class = parse(key, v)?,
            "dataset_seed" => self.dataset.seed = parse(key, v)?,
            "render_size" => self.dataset.render_size = parse(key, v)?,
            _ => return Err(CliError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Checks every value against its owner's invariants.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: String| Err(CliError::Config(format!("{key}: {why}")));
        if let Err(e) = self.denoiser.validate() {
            return bad("denoiser", e.to_string());
        }
        if let Err(e) = self.train.validate() {
            return Err(CliError::Config(e.to_string()));
        }
        self.build_schedule()?;
        if self.denoiser.channels != 3 {
            return bad("channels", format!("the dataset is RGB, got {}", self.denoiser.channels));
        }
        if self.real_classes() > MAX_CLASSES {
            return bad(
                "num_classes",
                format!("at most {MAX_CLASSES} real classes plus null, got {}", self.denoiser.num_classes),
            );
        }
        let p = &self.sample;
        if !(p.guidance_scale.is_finite() && p.guidance_scale >= 0.0) {
            return bad("guidance_scale", format!("must be finite and >= 0, got {}", p.guidance_scale));
        }
        if p.samples_per_class == 0 {
            return bad("samples_per_class", "must be positive".into());
        }
        if p.feature_dim == 0 {
            return bad("feature_dim", "must be positive".into());
        }
        if self.dataset.per_class == 0 {
            return bad("per_class", "must be positive".into());
        }
        if self.dataset.render_size < 8 {
            return bad("render_size", format!("must be at least 8, got {}", self.dataset.render_size));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        text.parse()
    }
}

impl FromStr for RunConfig {
    type Err = CliError;

    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(CliError::Config(format!("line {}: duplicate key `{key}`", n + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| CliError::Config(format!("line {}: {}", n + 1, e.to_string().trim_start_matches("config: "))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.entries() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}
