//! Command-line driver: dataset synthesis, training, inference, evaluation,
//! gradient checking, and the non-local attention benchmark.

pub mod commands;
pub mod config;
pub mod error;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use salattn::gradsuite::SuiteOptions;

use config::RunConfig;
pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "salattn", version, about = "Video salient object detection at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic moving-shapes dataset under `dataset_root`.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Replace existing videos in a non-empty dataset directory.
        #[arg(long)]
        force: bool,
    },
    /// Train from scratch; writes the checkpoint and `output_dir/loss.csv`.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write one saliency PGM per frame of VIDEO_DIR to `output_dir/<video>/`.
    Infer {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to `checkpoint_path` from the config.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        video_dir: PathBuf,
    },
    /// Score predicted PGMs against ground-truth masks matched by name.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report directory; defaults to `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        pred_dir: PathBuf,
        gt_dir: PathBuf,
    },
    /// Multiply counts and wall time of the non-local variants.
    Bench {
        h: usize,
        w: usize,
        c: usize,
        #[arg(default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Finite-difference check of every differentiable op and the model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scale the matmul backward by 1.5 (negative control).
        #[arg(long, hide = true)]
        corrupt_matmul: bool,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Synth { config, force } => commands::cmd_synth(&load_config(config.as_deref())?, force, out),
        Command::Train { config } => commands::cmd_train(&load_config(config.as_deref())?, out).map(|_| ()),
        Command::Infer {
            config,
            checkpoint,
            video_dir,
        } => {
            let cfg = load_config(config.as_deref())?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.checkpoint_path.clone());
            commands::cmd_infer(&cfg, &ckpt, &video_dir, out).map(|_| ())
        }
        Command::Eval {
            config,
            out: dest,
            pred_dir,
            gt_dir,
        } => {
            let cfg = load_config(config.as_deref())?;
            let dest = dest.unwrap_or(cfg.output_dir);
            commands::cmd_eval(&pred_dir, &gt_dir, &dest, out).map(|_| ())
        }
        Command::Bench { h, w, c, repeats, seed } => commands::cmd_bench(h, w, c, repeats, seed, out).map(|_| ()),
        Command::Gradcheck { seed, corrupt_matmul } => commands::cmd_gradcheck(
            SuiteOptions {
                seed,
                corrupt_matmul,
            },
            out,
        ),
    }
}

/// Sizes the global pool from `SALATTN_THREADS` (unset or 0: automatic).
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("SALATTN_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| CliError::ConfigValue(format!("SALATTN_THREADS must be a non-negative integer, got {raw:?}")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::ConfigValue(format!("cannot size thread pool: {e}")))?;
    }
    Ok(())
}
