//! `fairmetric` command-line front end.
//!
//! Exit codes: 0 on success, 2 for usage and validation errors, 3 when the
//! numerics fail (divergence, degenerate input).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Serialize;

use commands::{BoundsArgs, DistanceArgs, ExploreArgs, FaceArgs, SimulateArgs, VimlArgs, WeatArgs};

#[derive(Debug, Parser)]
#[command(name = "fairmetric", about = "Learn and audit individually-fair Mahalanobis metrics")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Global {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Primary output file (a directory for `simulate`); stdout when omitted
    /// and the command allows it.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    #[arg(long, global = true, default_value = "info",
          value_parser = ["error", "warn", "info", "debug", "trace", "off"])]
    pub log_level: String,
    /// Worker threads where the computation allows it.
    #[arg(long, global = true, default_value_t = 1,
          value_parser = clap::value_parser!(u32).range(1..=256))]
    pub threads: u32,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate the sensitive subspace from comparable groups or pairs.
    Face(FaceArgs),
    /// Fit the scaled-logistic model to labelled pairs.
    Explore(ExploreArgs),
    /// Solve the score variational inequality for a general link.
    Viml(VimlArgs),
    /// Run an association test under a metric.
    Weat(WeatArgs),
    /// Generate synthetic data with a known metric.
    Simulate(SimulateArgs),
    /// Metric distance between tokens.
    Distance(DistanceArgs),
    /// Evaluate the FACE error bound for a planted model.
    Bounds(BoundsArgs),
}

fn version() -> String {
    format!(
        "{} (library {}, metric format {}, embeddings: word2vec text)",
        env!("CARGO_PKG_VERSION"),
        fairmetric::VERSION,
        fairmetric::METRIC_FORMAT_VERSION
    )
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<fairmetric::Error>() {
        Some(e) if e.is_numerical() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let matches = Cli::command().version(version()).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let level = cli.global.log_level.parse().unwrap_or(log::LevelFilter::Info);
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();

    let g = &cli.global;
    let result = match &cli.command {
        Command::Face(a) => commands::face(g, a),
        Command::Explore(a) => commands::explore(g, a),
        Command::Viml(a) => commands::viml(g, a),
        Command::Weat(a) => commands::weat(g, a),
        Command::Simulate(a) => commands::simulate(g, a),
        Command::Distance(a) => commands::distance(g, a),
        Command::Bounds(a) => commands::bounds(g, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
