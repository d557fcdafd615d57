//! Simulated distributed optimizer step with an equivalence check.

use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, ensure, Result};
use clap::Args;
use lopt_core::distsim::{mean_gradients, run_step, CommTrace, CostModel, Strategy, CSV_HEADER};
use lopt_core::engine::{max_relative_deviation, ExecPath};
use lopt_core::optim::{OptimizerHandle, OptimizerWeights};
use lopt_core::synth;
use lopt_core::tensors::ParamTensor;

use crate::setup;
use crate::{parse_path, parse_strategy, EngineArgs, WeightsArgs};

/// Largest deviation from the single-device step tolerated before writing a trace.
pub const TOLERANCE: f64 = 1e-6;

#[derive(Args, Debug, Clone)]
pub struct DistArgs {
    /// Simulated devices.
    #[arg(long = "devices", short = 'n', default_value_t = 4)]
    pub devices: usize,
    /// Strategy to run; every strategy when absent.
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Option<Strategy>,
    /// Number of equally shaped tensors in the model.
    #[arg(long, default_value_t = 8)]
    pub tensors: usize,
    #[arg(long, default_value_t = 256)]
    pub rows: usize,
    #[arg(long, default_value_t = 256)]
    pub cols: usize,
    #[arg(long, default_value = "fused", value_parser = parse_path)]
    pub path: ExecPath,
    /// Link bandwidth in bytes/s; communication phases are timed by the cost
    /// model instead of the clock when given.
    #[arg(long)]
    pub bandwidth: Option<f64>,
    /// Per-collective latency in seconds for the cost model.
    #[arg(long, default_value_t = 0.0, requires = "bandwidth")]
    pub latency: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[command(flatten)]
    pub weights: WeightsArgs,
}

fn worst(a: &OptimizerHandle, b: &OptimizerHandle) -> f64 {
    a.params()
        .iter()
        .zip(b.params())
        .map(|((_, x), (_, y))| max_relative_deviation(x.as_slice(), y.as_slice()))
        .fold(0.0, f64::max)
}

/// Runs each requested strategy from the same starting point and checks it
/// against a single-device step on the mean gradient. Returns the traces.
pub fn traces(args: &DistArgs) -> Result<Vec<CommTrace>> {
    ensure!(args.devices >= 1, "--devices must be at least 1");
    ensure!(args.tensors >= 1, "--tensors must be at least 1");
    let mut rng = synth::rng(args.seed);
    let shapes = vec![(args.rows, args.cols); args.tensors];
    let params = setup::random_tensors(&shapes, 1.0, &mut rng);
    let grads: Vec<Vec<ParamTensor>> = (0..args.devices)
        .map(|_| setup::random_tensors(&shapes, 1.0, &mut rng))
        .collect();
    let weights = setup::weights(&args.weights, args.seed)?;
    let start = OptimizerHandle::new(setup::named(params, "t"), OptimizerWeights::Shared(weights))?
        .with_path(args.path)
        .with_engine(setup::engine(&args.engine)?);

    let mut oracle = start.clone();
    oracle.step(&mean_gradients(&grads)?, None)?;

    let strategies = match args.strategy {
        Some(s) => vec![s],
        None => Strategy::ALL.to_vec(),
    };
    let cost = args.bandwidth.map(|bw| CostModel {
        bandwidth_bytes_per_s: bw,
        latency_s: args.latency,
    });
    let mut out = Vec::new();
    for strategy in strategies {
        let mut h = start.clone();
        let outcome = run_step(strategy, &mut h, &grads)?;
        let dev = worst(&h, &oracle);
        if dev > TOLERANCE {
            bail!("{strategy} with {} devices deviates from the single-device step by {dev:e}", args.devices);
        }
        outcome.trace.validate(&shapes, h.spec().d_feat)?;
        out.push(match &cost {
            Some(model) => outcome.trace.modeled(model),
            None => outcome.trace,
        });
    }
    Ok(out)
}

pub fn run(args: &DistArgs) -> Result<()> {
    let traces = traces(args)?;
    let mut file = std::fs::File::create(&args.out)?;
    writeln!(file, "{CSV_HEADER}")?;
    for t in &traces {
        file.write_all(t.csv_rows().as_bytes())?;
        eprintln!("{} N={}: {:.3} ms total", t.strategy, t.workers, t.total_ms());
    }
    Ok(())
}
