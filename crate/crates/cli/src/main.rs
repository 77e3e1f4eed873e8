use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lamamba::diffusion::{Dataset, SampleOptions, TrainConfig, VarianceMode, DEFAULT_SAMPLING_STEPS};
use lamamba::flops::FlopsMode;
use lamamba::harness::{self, SampleArgs, TrainOptions};
use lamamba::{ModelConfig, Scalar};

#[derive(Parser)]
#[command(
    name = "lamamba",
    version,
    about = "LaMamba-Diff backbone: FLOPs audit, toy training and sampling"
)]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Floating-point type used for weights and activations.
    #[arg(long, global = true, value_enum, default_value_t = Dtype::F32)]
    dtype: Dtype,
    /// Output file of the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Dtype {
    F32,
    F64,
}

#[derive(Args)]
struct ModelArgs {
    /// Built-in preset: S, B, L, XL or T.
    #[arg(long)]
    preset: Option<String>,
    /// JSON model configuration; overrides --preset.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ModelArgs {
    fn resolve(&self) -> Result<ModelConfig> {
        Ok(harness::resolve_config(self.preset.as_deref(), self.config.as_deref())?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the FLOPs census of a model; --out writes it as JSON.
    Flops {
        #[command(flatten)]
        model: ModelArgs,
        /// Image resolution in pixels.
        #[arg(long, default_value_t = 256)]
        resolution: usize,
        #[arg(long, default_value = "full")]
        mode: FlopsMode,
    },
    /// Train from scratch; --out is the checkpoint path.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        /// Latent dataset (LMDF with `latents` and `labels`).
        #[arg(long, conflicts_with = "synthetic")]
        data: Option<PathBuf>,
        /// Use K standard-normal latents instead of --data.
        #[arg(long)]
        synthetic: Option<usize>,
        /// Latent side length of the synthetic set.
        #[arg(long, default_value_t = 8)]
        size: usize,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        /// Loss log (CSV).
        #[arg(long, default_value = "out.csv")]
        log: PathBuf,
    },
    /// Draw latents from a checkpoint; --out is the LMDF result.
    Sample {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated class labels, one sample each.
        #[arg(long, value_delimiter = ',', required = true)]
        labels: Vec<usize>,
        #[arg(long, default_value_t = 1.0)]
        cfg_scale: f64,
        #[arg(long, default_value_t = DEFAULT_SAMPLING_STEPS)]
        steps: usize,
        /// Latent side length.
        #[arg(long, default_value_t = 8)]
        size: usize,
        /// Sample with the averaged weights.
        #[arg(long)]
        ema: bool,
    },
    /// Finite-difference check of every parameter group (tiny preset, f64).
    Gradcheck {
        #[command(flatten)]
        model: ModelArgs,
        /// Test hook: perturb every backward rule.
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
    /// List the tensors of an LMDF file.
    Inspect { path: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let out = cli.out.as_deref();
    match cli.command {
        Command::Flops { model, resolution, mode } => {
            let report = harness::cmd_flops(&model.resolve()?, resolution, mode, out)?;
            emit(&report.to_table())?;
        }
        Command::Train {
            model,
            data,
            synthetic,
            size,
            steps,
            batch_size,
            lr,
            log,
        } => {
            let cfg = model.resolve()?;
            let opts = TrainOptions {
                steps,
                train: TrainConfig {
                    batch_size,
                    lr,
                    ..TrainConfig::default()
                },
                ..TrainOptions::default()
            };
            let source = match (data, synthetic) {
                (Some(path), _) => Source::File(path),
                (None, Some(k)) => Source::Synthetic(k, size),
                (None, None) => bail!("train needs --data or --synthetic"),
            };
            let ckpt = out.unwrap_or(Path::new("checkpoint.lmdf"));
            match cli.dtype {
                Dtype::F32 => train::<f32>(&cfg, &source, &opts, cli.seed, ckpt, &log)?,
                Dtype::F64 => train::<f64>(&cfg, &source, &opts, cli.seed, ckpt, &log)?,
            }
        }
        Command::Sample {
            model,
            checkpoint,
            labels,
            cfg_scale,
            steps,
            size,
            ema,
        } => {
            let cfg = model.resolve()?;
            let args = SampleArgs {
                labels,
                size: (size, size),
                use_ema: ema,
                options: SampleOptions {
                    steps,
                    cfg_scale,
                    variance: VarianceMode::Learned,
                },
            };
            let dest = out.unwrap_or(Path::new("samples.lmdf"));
            let shape = match cli.dtype {
                Dtype::F32 => harness::cmd_sample::<f32>(&cfg, &checkpoint, &args, cli.seed, dest)?
                    .shape()
                    .to_vec(),
                Dtype::F64 => harness::cmd_sample::<f64>(&cfg, &checkpoint, &args, cli.seed, dest)?
                    .shape()
                    .to_vec(),
            };
            println!("wrote samples {shape:?} to {}", dest.display());
        }
        Command::Gradcheck { model, corrupt_backward } => {
            let cfg = model.resolve()?;
            let report = harness::cmd_gradcheck(&cfg, cli.seed, corrupt_backward)?;
            for g in &report.groups {
                println!("{:<48} {:>8} {:.3e}", g.group, g.numel, g.max_rel_err);
            }
            if let Some(path) = out {
                let json = serde_json::to_string_pretty(&report)?;
                std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))?;
            }
            if !report.passed() {
                eprintln!("gradcheck failed (tolerance {:e}):", report.tolerance);
                for g in report.failures() {
                    eprintln!("  {} {:.3e}", g.group, g.max_rel_err);
                }
                return Ok(ExitCode::FAILURE);
            }
            println!("gradcheck passed, worst {:.3e}", report.worst());
        }
        Command::Inspect { path } => emit(&harness::cmd_inspect(&path)?)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn emit(text: &str) -> Result<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

enum Source {
    File(PathBuf),
    Synthetic(usize, usize),
}

fn train<T: Scalar>(cfg: &ModelConfig, source: &Source, opts: &TrainOptions, seed: u64, ckpt: &Path, log: &Path) -> Result<()> {
    let data: Dataset<T> = match source {
        Source::File(path) => Dataset::load(path).with_context(|| format!("loading {}", path.display()))?,
        Source::Synthetic(k, size) => Dataset::synthetic(*k, *size, *size, cfg.num_classes, seed)?,
    };
    let summary = harness::cmd_train(cfg, &data, opts, seed, ckpt, log)?;
    println!(
        "trained {} steps: eval L_simple {:.6} -> {:.6}; checkpoint {}, log {}",
        opts.steps,
        summary.initial_eval,
        summary.final_eval,
        ckpt.display(),
        log.display()
    );
    Ok(())
}
