use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};

use coarse3d::dataset::{synthetic_scenes, write_dataset};
use coarse3d::synthetic::SceneSpec;
use coarse3d::training::experiment::{CHECKPOINT_FILE, METRICS_FILE};
use coarse3d::training::metrics::{read_metrics, write_curves};
use coarse3d::training::{evaluate, run_experiment, Checkpoint, Dataset, ExperimentConfig};

const SEED_ENV: &str = "COARSE3D_SEED";

#[derive(Parser)]
#[command(
    name = "coarse3d",
    version,
    about = "Weakly supervised LiDAR range-image segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labelled dataset (velodyne/, labels/, manifest.txt).
    Generate {
        #[arg(long, default_value_t = 10)]
        scenes: usize,
        /// Dataset seed [default: $COARSE3D_SEED or 0]
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write a run directory (config, metrics, report, checkpoint).
    #[command(after_long_help = ExperimentConfig::help_text())]
    Train {
        /// Config file of `key = value` lines.
        #[arg(long)]
        config: Option<PathBuf>,
        /// `key=value`, applied after the config file; repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Same as `--override annotation_ratio=R`.
        #[arg(long)]
        ratio: Option<f64>,
        /// Same as `--override lambda_nce=0`.
        #[arg(long)]
        no_contrast: bool,
        /// Same as `--override seed=S` [default: $COARSE3D_SEED or 0]
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a run's checkpoint and write the IoU table and curve files.
    Eval {
        /// Run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        /// Checkpoint to evaluate [default: RUN/checkpoint.bin]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output directory [default: RUN]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Turn on kNN post-processing.
        #[arg(long)]
        knn: bool,
    },
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn env_seed() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .with_context(|| format!("{SEED_ENV}={v:?} is not an unsigned integer"))
            .map_err(usage),
        Err(_) => Ok(None),
    }
}

fn generate(scenes: usize, seed: Option<u64>, classes: usize, out: &Path) -> Result<(), Failure> {
    let seed = match seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let spec = SceneSpec {
        n_classes: classes,
        ..Default::default()
    };
    spec.validate().map_err(usage)?;
    let data = synthetic_scenes(&spec, seed, scenes)?;
    write_dataset(out, &data).with_context(|| format!("writing dataset to {}", out.display()))?;
    println!("wrote {scenes} scenes to {}", out.display());
    Ok(())
}

fn train_config(
    config: Option<&Path>,
    overrides: &[String],
    ratio: Option<f64>,
    no_contrast: bool,
    seed: Option<u64>,
) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::default();
    if let Some(s) = env_seed()? {
        cfg.seed = s;
    }
    if let Some(path) = config {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(usage)?;
        cfg = ExperimentConfig::parse_over(cfg, &text)
            .with_context(|| format!("in {}", path.display()))
            .map_err(usage)?;
    }
    for kv in overrides {
        cfg.apply_override(kv).map_err(usage)?;
    }
    if let Some(r) = ratio {
        cfg.annotation_ratio = r;
    }
    if no_contrast {
        cfg.lambda_nce = 0.0;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn eval(
    run: &Path,
    checkpoint: Option<PathBuf>,
    out: Option<PathBuf>,
    knn: bool,
) -> Result<(), Failure> {
    let ckpt_path = checkpoint.unwrap_or_else(|| run.join(CHECKPOINT_FILE));
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let mut cfg = ckpt.config.clone();
    cfg.knn |= knn;
    let model = ckpt.model()?;
    let data = Dataset::build(&cfg)?;
    if data.val.is_empty() {
        return Err(usage(anyhow!(
            "the run's configuration holds out no validation scenes"
        )));
    }
    let report = evaluate(&model, &data.val, &cfg)?;
    let out = out.unwrap_or_else(|| run.to_path_buf());
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let table = out.join("eval_report.tsv");
    fs::write(&table, report.to_table()).with_context(|| format!("writing {}", table.display()))?;
    let metrics = run.join(METRICS_FILE);
    if metrics.exists() {
        write_curves(&read_metrics(&metrics)?, &out)?;
    }
    println!("miou\t{:.6}", report.miou);
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Generate {
            scenes,
            seed,
            classes,
            out,
        } => generate(scenes, seed, classes, &out),
        Command::Train {
            config,
            overrides,
            ratio,
            no_contrast,
            seed,
            out,
        } => {
            let cfg = train_config(config.as_deref(), &overrides, ratio, no_contrast, seed)?;
            let summary = run_experiment(&cfg, &out)?;
            println!("miou\t{:.6}", summary.report.miou);
            Ok(())
        }
        Command::Eval {
            run,
            checkpoint,
            out,
            knn,
        } => eval(&run, checkpoint, out, knn),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
