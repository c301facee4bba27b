use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tdcae::pipeline::Subset;

mod commands;
mod config;

#[derive(Debug, Parser)]
#[command(
    name = "tdcae",
    version,
    about = "Latent-dynamics anomaly detection for run-to-failure data"
)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// Root seed (replaces the configured seed list).
    #[arg(long)]
    seed: Option<u64>,
    /// fd001, fd003 or synthetic.
    #[arg(long, value_parser = parse_subset)]
    subset: Option<Subset>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory containing train_FD00x.txt.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
struct ModelFlags {
    /// Weight of the consistency term.
    #[arg(long, value_parser = non_negative)]
    alpha: Option<f64>,
    /// Latent width (even).
    #[arg(long)]
    latent_dim: Option<usize>,
    /// Treat the central difference as a constant target.
    #[arg(long)]
    stop_gradient: bool,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Engines {
    Train,
    Test,
    All,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Integrate the drifting pendulum and box-count a phase slice.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Disable the drift terms.
        #[arg(long)]
        no_drift: bool,
        #[arg(long, value_parser = positive)]
        dt: Option<f64>,
        #[arg(long, value_parser = positive)]
        t_end: Option<f64>,
    },
    /// Train one autoencoder per seed and fit its detection bands.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        /// Grid-search percentiles and window on the training engines.
        #[arg(long)]
        optimize: bool,
    },
    /// Score a checkpoint on a set of engines.
    Detect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        engines: Engines,
        /// Refit bands on the training engines instead of using stored ones.
        #[arg(long)]
        refit: bool,
    },
    /// Dimension, rank, injectivity and consistency diagnostics.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "train")]
        engines: Engines,
    },
    /// Merge metrics files into mean ± std tables.
    Report {
        /// metrics.json files or directories containing them.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_subset(s: &str) -> Result<Subset, String> {
    s.parse()
}

fn positive(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        Ok(v) => Err(format!("{v} must be positive")),
        Err(e) => Err(e.to_string()),
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.is_finite() => Ok(v),
        Ok(v) => Err(format!("{v} must be non-negative")),
        Err(e) => Err(e.to_string()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
