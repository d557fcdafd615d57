//! `lopt`: benchmarks, toy training, distributed-step traces, plots and
//! weights-file tools for the learned-optimizer engine.

mod bench;
mod dist;
mod plot;
mod schema;
mod setup;
mod train;
mod weights;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lopt_core::distsim::Strategy;
use lopt_core::engine::ExecPath;
use lopt_core::features::FeatureSetId;

#[derive(Parser)]
#[command(name = "lopt", version, about = "Learned-optimizer step engine tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Time optimizer steps over a sweep of model sizes and write a CSV.
    Bench(bench::BenchArgs),
    /// Train a toy task and write the per-step loss as CSV.
    Train(train::TrainArgs),
    /// Run one simulated data-parallel step and write the communication trace.
    Distbench(dist::DistArgs),
    /// Render a bench or train CSV as an SVG chart.
    Plot(plot::PlotArgs),
    /// Inspect, convert or create learned-optimizer weight files.
    #[command(subcommand)]
    Weights(weights::WeightsCommand),
}

/// Engine options shared by the stepping commands.
#[derive(Args, Clone, Debug)]
pub struct EngineArgs {
    /// Threads for the fused passes.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Scratch cap in bytes for engine temporaries (unlimited when absent).
    #[arg(long)]
    pub scratch_cap_bytes: Option<usize>,
}

/// Where learned-optimizer weights come from.
#[derive(Args, Clone, Debug)]
pub struct WeightsArgs {
    /// Weights file; random weights from `--seed` when absent.
    #[arg(long, env = "LOPT_WEIGHTS")]
    pub weights: Option<PathBuf>,
    /// Feature set for random weights.
    #[arg(long, default_value = "small_fc_lopt", value_parser = parse_feature_set)]
    pub feature_set: FeatureSetId,
}

pub fn parse_feature_set(s: &str) -> Result<FeatureSetId, String> {
    s.parse().map_err(|e: lopt_core::Error| e.to_string())
}

pub fn parse_path(s: &str) -> Result<ExecPath, String> {
    s.parse().map_err(|e: lopt_core::Error| e.to_string())
}

pub fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: lopt_core::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Bench(args) => bench::run(&args),
        Command::Train(args) => train::run(&args),
        Command::Distbench(args) => dist::run(&args),
        Command::Plot(args) => plot::run(&args),
        Command::Weights(cmd) => weights::run(&cmd),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
