//! `dgcrn` command line: synthetic data, graph caches, training, evaluation
//! and reports. One command per process.

mod commands;
mod manifest;
mod pipeline;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use dgcrn_core::{Ablation, Config, Error, Result};

pub use manifest::RunManifest;
pub use pipeline::{resolve_config, threads_from_env};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "dgcrn", version, about = "Dynamic graph convolutional recurrent network for traffic-speed forecasting")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML configuration; missing keys take the defaults listed below.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides `seed` from the configuration.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Output directory, created if needed.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Component ablation; repeatable.
    #[arg(long, global = true, value_name = "NAME")]
    pub ablation: Vec<Ablation>,
    /// Reported horizons in steps, comma separated.
    #[arg(long, global = true, value_name = "LIST", value_delimiter = ',')]
    pub horizons: Option<Vec<usize>>,
    /// Parameter precision; 32 rounds parameters to f32 after every update
    /// and stores checkpoints as f32.
    #[arg(long, global = true, value_enum, default_value = "64")]
    pub precision: Precision,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    #[value(name = "32")]
    F32,
    #[value(name = "64")]
    F64,
}

impl Precision {
    pub fn bits(self) -> u8 {
        match self {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpeedFormat {
    Bin,
    Csv,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic road network and speed series.
    GenData {
        #[arg(long, value_enum, default_value = "bin")]
        format: SpeedFormat,
    },
    /// Build the thresholded Gaussian-kernel graph and cache it.
    BuildGraph {
        /// Distance CSV `from,to,distance`; defaults to `data.distances`.
        #[arg(long, value_name = "PATH")]
        distances: Option<PathBuf>,
        /// Node count when the CSV omits isolated high ids.
        #[arg(long)]
        nodes: Option<usize>,
    },
    /// Train a model; writes a checkpoint, a training log and test metrics.
    Train,
    /// Score a checkpoint on a split, or a prediction file against truths.
    Eval {
        #[arg(long, value_name = "PATH", required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
        split: String,
        /// Speed file of predictions; compared row by row with `--truth`.
        #[arg(long, value_name = "PATH", requires = "truth", conflicts_with = "checkpoint")]
        predictions: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        truth: Option<PathBuf>,
    },
    /// Finite-difference check of the full backward pass on a tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Largest accepted relative error.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Train and score the model next to the HA and persistence baselines.
    Bench,
    /// Correlation and speed histograms of a dataset.
    Analyze {
        #[arg(long, default_value_t = 20)]
        bins: usize,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::BuildGraph { .. } => "build-graph",
            Command::Train => "train",
            Command::Eval { .. } => "eval",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Bench => "bench",
            Command::Analyze { .. } => "analyze",
        }
    }
}

fn defaults_help() -> String {
    let mut s = String::from("Configuration keys and defaults:\n");
    for (k, v) in Config::documented_defaults() {
        s.push_str(&format!("  {k} = {v}\n"));
    }
    s.push_str("\nEnvironment:\n  DGCRN_THREADS  cap on worker threads (default 1)\n");
    s
}

/// The clap command with the configuration listing attached to every
/// subcommand's help.
pub fn command() -> clap::Command {
    let help = defaults_help();
    Cli::command()
        .after_long_help(help.clone())
        .mut_subcommands(|sc| sc.after_help(help.clone()))
}

pub fn exit_code(err: &Error) -> i32 {
    if err.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_INVALID
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_INVALID,
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return EXIT_INVALID;
        }
    };
    match commands::dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Resolved inputs shared by every command.
pub(crate) struct RunContext {
    pub config: Config,
    pub config_dir: Option<PathBuf>,
    pub threads: usize,
}

pub(crate) fn context(common: &Common) -> Result<RunContext> {
    let (config, config_dir) = resolve_config(common)?;
    Ok(RunContext {
        config,
        config_dir,
        threads: threads_from_env()?,
    })
}
