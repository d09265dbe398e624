//! `cardiored`: forward simulation, synthetic measurements, offline bases,
//! conductivity estimation and DOE maps from one JSON config.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{Mode, Setup};
use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "cardiored", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Full-order Monodomain simulation.
    Forward(Common),
    /// Noisy synthetic measurements at `measurement.sigma_exact`.
    Measure(Common),
    /// One basis archive per polar sample.
    Bases(Common),
    /// Conductivity estimation.
    Estimate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "reduced")]
        mode: Mode,
    },
    /// Domain-of-effectiveness maps for `doe.generators`.
    Doe(Common),
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let common = match &cli.command {
        Command::Forward(c) | Command::Measure(c) | Command::Bases(c) | Command::Doe(c) => c,
        Command::Estimate { common, .. } => common,
    };
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    let setup = Setup::new(cfg)?;
    match cli.command {
        Command::Forward(_) => commands::forward(&setup),
        Command::Measure(_) => commands::measure(&setup),
        Command::Bases(_) => commands::bases(&setup),
        Command::Estimate { mode, .. } => commands::estimate(&setup, mode),
        Command::Doe(_) => commands::doe(&setup),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
