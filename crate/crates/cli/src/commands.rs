//! The train / sample / eval / export-dataset verbs as library calls.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use diffusion_core::dataset::{self, LabeledImage};
use diffusion_core::metrics::{frechet_distance, image_stats, FeatureProjector};
use diffusion_core::sampler::{self, SampleRequest, Weights};
use diffusion_core::trainer::{self, TrainingData};
use diffusion_core::{Denoiser, Tensor};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{io_err, CliError, Result};
use crate::ppm;

/// The preprocessed training set of a config: images in `[-1, 1]` and labels.
pub fn training_set(cfg: &RunConfig) -> Result<(Vec<Tensor>, Vec<usize>)> {
    let d = &cfg.dataset;
    let raw = dataset::generate_dataset(cfg.real_classes(), d.per_class, d.render_size, d.seed)?;
    let images = raw
        .iter()
        .map(|img| dataset::preprocess(img, cfg.denoiser.image_size))
        .collect::<diffusion_core::Result<Vec<_>>>()?;
    let labels = raw.iter().map(|img| img.label).collect();
    Ok((images, labels))
}

pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub losses: Vec<f64>,
    pub epoch_means: Vec<f64>,
}

/// Trains from scratch. `progress(step, loss)` sees every batch.
pub fn train(cfg: &RunConfig, mut progress: impl FnMut(usize, f64)) -> Result<TrainRun> {
    cfg.validate()?;
    let net = Denoiser::new(cfg.denoiser)?;
    let schedule = cfg.build_schedule()?;
    let (images, labels) = training_set(cfg)?;
    let out = trainer::train(
        &net,
        &schedule,
        &cfg.train,
        TrainingData {
            images: &images,
            labels: &labels,
        },
        |i, l| progress(i + 1, l),
    )?;
    let epoch_means = out.epoch_means();
    let checkpoint = Checkpoint {
        config: *cfg,
        step_count: out.optimizer.step,
        rng_note: format!(
            "init/train seed {}, dataset seed {}",
            cfg.train.seed, cfg.dataset.seed
        ),
        params: out.params,
        ema: out.ema.shadow,
    };
    Ok(TrainRun {
        checkpoint,
        losses: out.losses,
        epoch_means,
    })
}

/// One `step,loss` line per batch, steps counted from 1.
pub fn loss_log(losses: &[f64]) -> String {
    let mut s = String::with_capacity(losses.len() * 24);
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{},{}\n", i + 1, l));
    }
    s
}

/// `train` verb: writes the checkpoint and the loss log.
pub fn cmd_train(
    config_path: &Path,
    checkpoint_path: &Path,
    log_path: &Path,
    progress: impl FnMut(usize, f64),
) -> Result<TrainRun> {
    let cfg = RunConfig::load(config_path)?;
    let run = train(&cfg, progress)?;
    run.checkpoint.save(checkpoint_path)?;
    fs::write(log_path, loss_log(&run.losses)).map_err(io_err(log_path))?;
    Ok(run)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleArgs {
    pub class_index: usize,
    pub guidance_scale: f64,
    pub count: usize,
    pub seed: u64,
    pub use_ema: bool,
    /// Skip the unconditional branch; the guidance scale is then unused.
    pub conditional_only: bool,
}

/// Samples in `[-1, 1]`, shape `(count, C, H, W)`.
pub fn generate(ckpt: &Checkpoint, args: &SampleArgs) -> Result<Tensor> {
    let net = Denoiser::new(ckpt.config.denoiser)?;
    let schedule = ckpt.config.build_schedule()?;
    let weights = Weights {
        raw: &ckpt.params,
        ema: &ckpt.ema,
    };
    let req = SampleRequest {
        class_index: args.class_index,
        guidance_scale: args.guidance_scale,
        count: args.count,
        seed: args.seed,
        use_ema: args.use_ema,
    };
    let x = if args.conditional_only {
        sampler::sample_conditional(&net, weights, &schedule, &req)?
    } else {
        sampler::sample(&net, weights, &schedule, &req)?
    };
    Ok(x)
}

pub fn sample_file_name(class: usize, seed: u64, index: usize) -> String {
    format!("sample_{class}_{seed}_{index}.ppm")
}

/// `sample` verb: one PPM per image in `out_dir`.
pub fn cmd_sample(checkpoint_path: &Path, args: &SampleArgs, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let ckpt = Checkpoint::load(checkpoint_path)?;
    let x = generate(&ckpt, args)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut paths = Vec::with_capacity(args.count);
    for i in 0..args.count {
        let path = out_dir.join(sample_file_name(args.class_index, args.seed, i));
        ppm::write(&dataset::denormalize(&x.outer(i)), &path)?;
        paths.push(path);
    }
    Ok(paths)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    /// Raw weights, no guidance.
    Baseline,
    /// EMA weights with the configured guidance scale.
    Enhanced,
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::Baseline => "baseline",
            Arm::Enhanced => "enhanced",
        })
    }
}

impl FromStr for Arm {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Arm::Baseline),
            "enhanced" => Ok(Arm::Enhanced),
            other => Err(CliError::Eval(format!("unknown arm `{other}` (baseline or enhanced)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub arm: Arm,
    pub fid: f64,
    pub n_gen: usize,
    pub n_ref: usize,
    pub projector_seed: u64,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "arm={} fid={} n_gen={} n_ref={} projector_seed={}",
            self.arm, self.fid, self.n_gen, self.n_ref, self.projector_seed
        )
    }
}

/// Everything an evaluation produced, beyond the report line.
pub struct Evaluation {
    pub report: EvalReport,
    /// `(N, C, H, W)` generated images in `[-1, 1]`, class-major.
    pub generated: Tensor,
    pub generated_labels: Vec<usize>,
    /// Fraction of generated images nearest (RMS) to their own class mean.
    pub fidelity: f64,
}

/// Sampling seed used for class `k` under a user seed.
pub fn class_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_mul(1 << 20).wrapping_add(k as u64)
}

/// Fréchet distance between two image stacks under one projector.
pub fn fid_between(a: &Tensor, b: &Tensor, projector: &FeatureProjector) -> Result<f64> {
    if a.shape()[1..] != b.shape()[1..] {
        return Err(CliError::Eval(format!(
            "image sizes differ: {:?} vs {:?}",
            &a.shape()[1..],
            &b.shape()[1..]
        )));
    }
    let sa = image_stats(a, projector)?;
    let sb = image_stats(b, projector)?;
    Ok(frechet_distance(&sa, &sb)?)
}

/// Generates `samples_per_class` images per class for `arm` and scores them
/// against the regenerated training set of `cfg`.
pub fn evaluate(ckpt: &Checkpoint, cfg: &RunConfig, arm: Arm, seed: u64) -> Result<Evaluation> {
    cfg.validate()?;
    let (ref_images, ref_labels) = training_set(cfg)?;
    let reference = Tensor::stack(&ref_images)?;
    let per = cfg.sample.samples_per_class;
    let classes = ckpt.config.real_classes();
    if cfg.real_classes() != classes {
        return Err(CliError::Eval(format!(
            "checkpoint has {classes} classes, eval config has {}",
            cfg.real_classes()
        )));
    }
    let mut generated = Vec::with_capacity(per * classes);
    let mut labels = Vec::with_capacity(per * classes);
    for k in 0..classes {
        let args = match arm {
            Arm::Baseline => SampleArgs {
                class_index: k,
                guidance_scale: 0.0,
                count: per,
                seed: class_seed(seed, k),
                use_ema: false,
                conditional_only: true,
            },
            Arm::Enhanced => SampleArgs {
                class_index: k,
                guidance_scale: cfg.sample.guidance_scale,
                count: per,
                seed: class_seed(seed, k),
                use_ema: true,
                conditional_only: false,
            },
        };
        let x = generate(ckpt, &args)?;
        for i in 0..per {
            generated.push(x.outer(i));
            labels.push(k);
        }
    }
    let generated = Tensor::stack(&generated)?;
    let input_dim = reference.len() / reference.shape()[0];
    let projector = FeatureProjector::new(input_dim, cfg.sample.feature_dim, cfg.sample.projector_seed)?;
    let fid = fid_between(&generated, &reference, &projector)?;
    let fidelity = class_fidelity(&generated, &labels, &ref_images, &ref_labels, cfg.real_classes())?;
    Ok(Evaluation {
        report: EvalReport {
            arm,
            fid,
            n_gen: generated.shape()[0],
            n_ref: reference.shape()[0],
            projector_seed: cfg.sample.projector_seed,
        },
        generated,
        generated_labels: labels,
        fidelity,
    })
}

/// Share of `generated` images whose nearest training-set class mean is
/// their own class.
pub fn class_fidelity(
    generated: &Tensor,
    labels: &[usize],
    ref_images: &[Tensor],
    ref_labels: &[usize],
    classes: usize,
) -> Result<f64> {
    let means = dataset::class_means(ref_images, ref_labels, classes)?;
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &k)| dataset::nearest_class(generated.outer(i).data(), &means) == k)
        .count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}

/// `eval` verb: writes the single report line to `report_path`.
pub fn cmd_eval(
    checkpoint_path: &Path,
    config_path: Option<&Path>,
    arm: Arm,
    seed: u64,
    report_path: &Path,
) -> Result<Evaluation> {
    let ckpt = Checkpoint::load(checkpoint_path)?;
    let cfg = match config_path {
        Some(p) => RunConfig::load(p)?,
        None => ckpt.config,
    };
    let eval = evaluate(&ckpt, &cfg, arm, seed)?;
    let mut f = fs::File::create(report_path).map_err(io_err(report_path))?;
    writeln!(f, "{}", eval.report).map_err(io_err(report_path))?;
    Ok(eval)
}

pub fn dataset_file_name(label: usize, index: usize) -> String {
    format!("dataset_{label}_{index}.ppm")
}

/// `export-dataset` verb: the raw (un-normalized) training images as PPM.
pub fn cmd_export_dataset(config_path: &Path, out_dir: &Path) -> Result<usize> {
    let cfg = RunConfig::load(config_path)?;
    let d = &cfg.dataset;
    let raw: Vec<LabeledImage> = dataset::generate_dataset(cfg.real_classes(), d.per_class, d.render_size, d.seed)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    for (i, img) in raw.iter().enumerate() {
        ppm::write(&img.pixels, &out_dir.join(dataset_file_name(img.label, i % d.per_class)))?;
    }
    Ok(raw.len())
}
