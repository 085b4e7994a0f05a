//! `lanegen` command-line runner.
//!
//! Every command resolves a [`config::RunConfig`] (defaults, then
//! `--config`, then `--set key=value`), echoes it into its output
//! directory, and maps failures onto exit codes: `0` success, `1` runtime
//! failure, `2` usage or validation error.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use lanegen::Error;

pub use commands::{evaluate_split, Evaluation};
pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    /// Wraps a core error raised while checking user input, so that even
    /// i/o failures there count as usage errors.
    pub fn from_core_usage(e: Error) -> Self {
        match e {
            Error::Io { .. } | Error::Image { .. } => CliError::Usage(e.to_string()),
            e => CliError::Core(e),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
            CliError::Core(e) => match e {
                Error::Validation(_) | Error::Config(_) | Error::PaletteFormat { .. } | Error::Dataset(_) => {
                    EXIT_USAGE
                }
                _ => EXIT_RUNTIME,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "lanegen", version, about = "Conditional GAN lane and road-marking segmentation")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.epochs=50`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Palette CSV (`id,name,r,g,b`); overrides `palette` in the config.
    #[arg(long, global = true)]
    pub palette: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic road-scene dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Samples per split as `train,val,test`.
        #[arg(long)]
        counts: Option<String>,
        /// Square image size in pixels.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train on `<data>/train`.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train the generator with the regression loss only.
        #[arg(long)]
        no_adversarial: bool,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate outputs for every PNG in a directory.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Noise seed; image `k` (sorted by name) uses `seed + k`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compute per-class and mean metrics on a split.
    Eval {
        /// Trained checkpoint; required unless `--self-check`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Score the ground truth against itself instead of a model.
        #[arg(long)]
        self_check: bool,
        /// Also write generated images and label maps.
        #[arg(long)]
        save_outputs: bool,
    },
    /// Build the noise, gamma and occlusion sets from a split.
    Perturb {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Evaluate this checkpoint on the clean and perturbed sets.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train with and without the adversarial term over several seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "1,2,3", value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Held-out split used for scoring.
        #[arg(long, default_value = "test")]
        eval_split: String,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
