//! Command-line interface: synth | train | eval | predict.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

mod commands;
mod dataio;
mod imageio;
mod overlay;
mod runconfig;

use clap::{Parser, Subcommand, ValueEnum};
use runconfig::RunConfig;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "retlesion", version, about = "Retinal lesion segmentation, classification and DR grading")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for retlesion::types::Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => retlesion::types::Split::Train,
            SplitArg::Val => retlesion::types::Split::Val,
            SplitArg::Test => retlesion::types::Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic dataset with a 70/10/20 split manifest.
    Synth {
        /// Optional generator config (JSON); defaults are built in.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of images to generate.
        #[arg(long)]
        n: usize,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Override the generator seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the image side (must be a multiple of 32).
        #[arg(long)]
        side: Option<usize>,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a segmentation or grading model from a run config.
    Train {
        /// Run config (JSON).
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on one dataset split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        split: SplitArg,
        /// Score the ground truth against itself instead of a model.
        #[arg(long)]
        oracle: bool,
    },
    /// Run one image through a checkpoint; write maps, masks, an overlay
    /// and a presence/grade report.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Binarization threshold for masks and contours.
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        /// Zero-pad images whose sides are not multiples of 32.
        #[arg(long)]
        allow_resize: bool,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
}

enum CliError {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

fn usage(e: anyhow::Error) -> CliError {
    CliError::Usage(e)
}

fn runtime(e: anyhow::Error) -> CliError {
    CliError::Runtime(e)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth {
            config,
            n,
            out,
            seed,
            side,
            force,
        } => {
            let cfg = commands::load_synth_config(config.as_deref(), seed, side).map_err(usage)?;
            commands::prepare_out_dir(&out, force).map_err(usage)?;
            commands::cmd_synth(&cfg, n, &out).map_err(runtime)
        }
        Command::Train { config } => {
            let cfg = RunConfig::load(&config).map_err(usage)?;
            commands::cmd_train(&cfg).map_err(runtime)
        }
        Command::Eval {
            config,
            checkpoint,
            split,
            oracle,
        } => {
            let cfg = RunConfig::load(&config).map_err(usage)?;
            if !oracle {
                // surface incompatible checkpoints as usage errors
                match commands::checkpoint_kind(&checkpoint).map_err(usage)?.as_str() {
                    "lesion_net" => {
                        retlesion::nn::checkpoint::load_lesion_net(&checkpoint)
                            .map_err(|e| usage(e.into()))?;
                    }
                    "grading" => {
                        retlesion::nn::checkpoint::load_grading_net(&checkpoint)
                            .map_err(|e| usage(e.into()))?;
                    }
                    other => {
                        return Err(usage(anyhow::anyhow!(
                            "unsupported checkpoint kind {other}"
                        )))
                    }
                }
            }
            commands::cmd_eval(&cfg, &checkpoint, split.into(), oracle).map_err(runtime)
        }
        Command::Predict {
            checkpoint,
            image,
            out,
            tau,
            allow_resize,
            force,
        } => {
            imageio::read_rgb(&image).map_err(usage)?;
            commands::checkpoint_kind(&checkpoint).map_err(usage)?;
            if !(0.0 < tau && tau < 1.0) {
                return Err(usage(anyhow::anyhow!("tau {tau} outside (0,1)")));
            }
            commands::prepare_out_dir(&out, force).map_err(usage)?;
            commands::cmd_predict(&checkpoint, &image, &out, tau, allow_resize).map_err(runtime)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
