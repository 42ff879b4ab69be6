use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use diffusion_cli::commands::{self, Arm, SampleArgs};
use diffusion_cli::RunConfig;

#[derive(Parser)]
#[command(name = "ddpm", version, about = "Train, sample and evaluate a class-conditional diffusion model")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch and write a checkpoint plus a per-step loss log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `<out>.loss.csv`.
        #[arg(long)]
        loss_log: Option<PathBuf>,
        /// Print one line per epoch to stderr.
        #[arg(long)]
        verbose: bool,
    },
    /// Generate images for one class and write them as PPM files.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "class")]
        class_index: usize,
        /// Guidance scale; defaults to the checkpoint's config.
        #[arg(long)]
        w: Option<f64>,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use the EMA weights (default from the checkpoint's config).
        #[arg(long, conflicts_with = "raw")]
        ema: bool,
        /// Use the raw weights.
        #[arg(long)]
        raw: bool,
        /// Conditional branch only, no guidance.
        #[arg(long)]
        conditional_only: bool,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Sample every class for one arm and report FID against the training set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides the config stored in the checkpoint for eval settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_arm)]
        arm: Arm,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
    },
    /// Write the procedural training set as PPM files.
    ExportDataset {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Print the default config.
    InitConfig,
}

fn parse_arm(s: &str) -> Result<Arm, String> {
    s.parse().map_err(|e: diffusion_cli::CliError| e.to_string())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Command::Train {
            config,
            out,
            loss_log,
            verbose,
        } => {
            let log = loss_log.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".loss.csv");
                p.into()
            });
            let cfg = RunConfig::load(&config)?;
            let per_epoch = cfg.dataset.per_class * cfg.real_classes();
            let batches = per_epoch.div_ceil(cfg.train.batch_size).max(1);
            let (mut sum, mut n) = (0.0, 0);
            let run = commands::cmd_train(&config, &out, &log, |step, loss| {
                if !verbose {
                    return;
                }
                sum += loss;
                n += 1;
                if step % batches == 0 {
                    eprintln!("epoch {} mean loss {:.5}", step / batches, sum / n as f64);
                    (sum, n) = (0.0, 0);
                }
            })
            .with_context(|| format!("training with {}", config.display()))?;
            println!(
                "wrote {} after {} steps, final epoch loss {}",
                out.display(),
                run.checkpoint.step_count,
                run.epoch_means.last().map_or("n/a".to_string(), |l| l.to_string())
            );
        }
        Command::Sample {
            checkpoint,
            class_index,
            w,
            count,
            seed,
            ema,
            raw,
            conditional_only,
            out_dir,
        } => {
            let ckpt = diffusion_cli::Checkpoint::load(&checkpoint)?;
            let defaults = ckpt.config.sample;
            let args = SampleArgs {
                class_index,
                guidance_scale: w.unwrap_or(defaults.guidance_scale),
                count,
                seed,
                use_ema: if ema || raw { ema } else { defaults.use_ema },
                conditional_only,
            };
            let paths = commands::cmd_sample(&checkpoint, &args, &out_dir)?;
            println!("wrote {} images to {}", paths.len(), out_dir.display());
        }
        Command::Eval {
            checkpoint,
            config,
            arm,
            seed,
            report,
        } => {
            let eval = commands::cmd_eval(&checkpoint, config.as_deref(), arm, seed, &report)?;
            println!("{} fidelity={}", eval.report, eval.fidelity);
        }
        Command::ExportDataset { config, out_dir } => {
            let n = commands::cmd_export_dataset(&config, &out_dir)?;
            println!("wrote {n} images to {}", out_dir.display());
        }
        Command::InitConfig => print!("{}", RunConfig::default()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
