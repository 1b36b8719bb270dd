//! `pointgame` command-line front end.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use pointgame_core::io::Shape;
use pointgame_core::train::{HeadKind, Scope};
use pointgame_core::Error;

pub use config::{CliConfig, Preset};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "pointgame", version, about = "Masked point-cloud autoencoder: pretraining, transfer and diagnostics")]
pub struct Cli {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML file with optional `preset`, `[model]` and `[train]` tables.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Model preset applied before the file and overrides.
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
    /// Override one key, e.g. `--set model.d=96 --set train.epochs=5`.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,
}

/// Shortcuts for the most common training keys.
#[derive(Debug, Args, Default, Clone)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    /// Peak learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Masked-reconstruction pretraining on a dataset directory.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Train a classification head (and optionally the backbone).
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "local")]
        scope: Scope,
        #[arg(long, default_value = "linear")]
        head: HeadKind,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Accuracy of a classifier checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Manifest split to score; untagged entries always count.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// n-way m-shot episodes with a fresh head per episode.
    Fewshot {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "n")]
        n_way: usize,
        #[arg(long = "m")]
        m_shot: usize,
        #[arg(long, default_value_t = pointgame_core::train::EPISODES)]
        episodes: usize,
        #[arg(long, default_value = "local")]
        scope: Scope,
        #[arg(long, default_value = "linear")]
        head: HeadKind,
        /// Also write `n_way,m_shot,episodes,mean,std` here.
        #[arg(long)]
        summary: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Global feature rows (2d values) per cloud.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; every entry is extracted.
        #[arg(long, conflicts_with = "input")]
        data: Option<PathBuf>,
        #[arg(long, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// SPFH rows (3 x bins columns) for every patch center of a cloud.
    Describe {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write input, visible and predicted point files per cloud.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Seed of the patch sample and mask.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Oracle, invariant and gradient suites.
    Selfcheck,
    /// Write a labeled synthetic shape dataset with a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = Shape::ALL.to_vec())]
        classes: Vec<Shape>,
        #[arg(long = "per-class", default_value_t = 50)]
        per_class: usize,
        #[arg(long = "test-per-class", default_value_t = 20)]
        test_per_class: usize,
        /// Points per cloud (defaults to the model's n).
        #[arg(long)]
        points: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Errors carry the exit status they map to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => EXIT_USAGE,
            Error::Divergence(_) | Error::NonFiniteGradient => EXIT_NUMERIC,
            _ => EXIT_DATA,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl Failure {
    pub fn io(what: &std::path::Path, e: std::io::Error) -> Self {
        Failure {
            code: EXIT_DATA,
            message: format!("{}: {e}", what.display()),
        }
    }
}

/// Parse `argv` (including the program name), run the command and return
/// the exit status. Reports go to `out`, diagnostics to `err`.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match commands::dispatch(&cli, out, err) {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}
