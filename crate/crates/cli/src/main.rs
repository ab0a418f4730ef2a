//! `urnet`: train, evaluate and calibrate user-resizable residual networks.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric divergence.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use urnet_core::Error;

pub(crate) const EXAMPLE_CONFIG: &str = include_str!("../configs/toy.json");

#[derive(Parser, Debug)]
#[command(name = "urnet", version, about = "User-resizable residual networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TrainMode {
    /// Scale sampled uniformly from a range each iteration.
    Urnet,
    /// Compression to one annealed target scale.
    Fixed,
    /// Plain training with random block dropping.
    BaselineRandom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GateOverride {
    Sigmoid,
    Binary,
    /// Ignore the gates and keep a random `round(S·N)` blocks.
    RandomDrop,
}

#[derive(clap::Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// `a,b,c` or `start:stop:step`.
    #[arg(long, default_value = "0.2:1.0:0.1")]
    grid: String,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes checkpoints, the epoch report and a summary.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "urnet")]
        mode: TrainMode,
        #[arg(long)]
        p: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long, num_args = 2, value_names = ["MIN", "MAX"])]
        range: Option<Vec<f64>>,
        #[arg(long)]
        s_fixed: Option<f64>,
        #[arg(long)]
        sigma: Option<f64>,
        /// Annealing epochs.
        #[arg(long)]
        anneal: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Start from this checkpoint instead of pretraining a backbone.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Accuracy, usage and MACs at each scale of a grid, one CSV row each.
    Eval {
        #[command(flatten)]
        args: EvalArgs,
        #[arg(long, value_enum)]
        gate_override: Option<GateOverride>,
        #[arg(long, default_value = "eval.csv")]
        name: String,
    },
    /// Per-block open frequency over a scale grid.
    UsageMap {
        #[command(flatten)]
        args: EvalArgs,
        #[arg(long, default_value = "usage_map.csv")]
        name: String,
    },
    /// Mean MACs per scale, for budget resolution.
    Calibrate {
        #[command(flatten)]
        args: EvalArgs,
        #[arg(long, default_value = "calibration.json")]
        name: String,
    },
    /// Largest calibrated scale whose mean cost fits a MAC budget.
    Resolve {
        #[arg(long)]
        calibration: PathBuf,
        #[arg(long)]
        budget: f64,
    },
    /// Print a complete example run configuration.
    ExampleConfig,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } => 3,
        Error::Data(_) | Error::Format(_) | Error::Checkpoint(_) | Error::Io(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train { config, mode, p, beta, range, s_fixed, sigma, anneal, seed, init, output_dir } => {
            let overrides = commands::TrainOverrides { mode, p, beta, range, s_fixed, sigma, anneal, seed, output_dir };
            commands::train(&config, &overrides, init.as_deref())
        }
        Command::Eval { args, gate_override, name } => commands::eval(&args, gate_override, &name),
        Command::UsageMap { args, name } => commands::usage_map(&args, &name),
        Command::Calibrate { args, name } => commands::calibrate(&args, &name),
        Command::Resolve { calibration, budget } => commands::resolve(&calibration, budget),
        Command::ExampleConfig => {
            print!("{EXAMPLE_CONFIG}");
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
