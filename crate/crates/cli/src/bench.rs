//! Optimizer step-time sweeps.

use std::path::PathBuf;
use std::time::Instant;

use anyhow::{ensure, Result};
use clap::{Args, ValueEnum};
use lopt_core::engine::ExecPath;
use lopt_core::optim::{Adafactor, AdafactorConfig, Adam, AdamConfig, OptimizerHandle, OptimizerWeights};
use lopt_core::synth;
use lopt_core::Error;

use crate::schema::{BenchRow, BENCH_SCHEMA, STATUS_OK, STATUS_OOM};
use crate::setup;
use crate::{EngineArgs, WeightsArgs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Workload {
    /// `depth` layers of a `width x width` weight and a `1 x width` bias.
    #[value(name = "mlp_sweep")]
    MlpSweep,
    /// Tensor shapes of a GPT-2-small-like model with `d_model = width` and
    /// `depth` blocks.
    #[value(name = "transformer_proxy")]
    TransformerProxy,
}

impl Workload {
    fn as_str(self) -> &'static str {
        match self {
            Workload::MlpSweep => "mlp_sweep",
            Workload::TransformerProxy => "transformer_proxy",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BenchOptimizer {
    #[value(name = "adam")]
    Adam,
    #[value(name = "adafactor")]
    Adafactor,
    #[value(name = "lopt_naive")]
    LoptNaive,
    #[value(name = "lopt_fused")]
    LoptFused,
}

impl BenchOptimizer {
    fn as_str(self) -> &'static str {
        match self {
            BenchOptimizer::Adam => "adam",
            BenchOptimizer::Adafactor => "adafactor",
            BenchOptimizer::LoptNaive => "lopt_naive",
            BenchOptimizer::LoptFused => "lopt_fused",
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct BenchArgs {
    #[arg(long, value_enum, default_value = "mlp_sweep")]
    pub workload: Workload,
    #[arg(long, value_delimiter = ',', default_values_t = [256usize, 512, 1024])]
    pub widths: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize])]
    pub depths: Vec<usize>,
    #[arg(long = "optimizer", value_enum, value_delimiter = ',', default_values = ["adam", "adafactor", "lopt_naive", "lopt_fused"])]
    pub optimizers: Vec<BenchOptimizer>,
    /// Timed steps per point (at least 3).
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// Untimed steps before timing (at least 1).
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    /// Vocabulary rows of the transformer proxy's token embedding.
    #[arg(long, default_value_t = 50257)]
    pub vocab: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[command(flatten)]
    pub weights: WeightsArgs,
}

impl BenchArgs {
    fn validate(&self) -> Result<()> {
        ensure!(self.repeats >= 3, "--repeats must be at least 3");
        ensure!(self.warmup >= 1, "--warmup must be at least 1");
        ensure!(!self.widths.is_empty() && !self.depths.is_empty(), "empty sweep");
        ensure!(!self.optimizers.is_empty(), "no optimizers selected");
        ensure!(
            self.widths.iter().chain(&self.depths).all(|&x| x > 0),
            "widths and depths must be positive"
        );
        Ok(())
    }
}

pub fn mlp_shapes(width: usize, depth: usize) -> Vec<(usize, usize)> {
    (0..depth).flat_map(|_| [(width, width), (1, width)]).collect()
}

/// Token and position embeddings, then per block two norms (gain and bias),
/// four attention matrices and the two MLP matrices, then a final norm.
pub fn transformer_shapes(d_model: usize, layers: usize, vocab: usize) -> Vec<(usize, usize)> {
    let norm = [(1, d_model), (1, d_model)];
    let mut shapes = vec![(vocab, d_model), (1024, d_model)];
    for _ in 0..layers {
        shapes.extend(norm);
        shapes.extend([(d_model, d_model); 4]);
        shapes.extend(norm);
        shapes.extend([(d_model, 4 * d_model), (4 * d_model, d_model)]);
    }
    shapes.extend(norm);
    shapes
}

/// Linear-interpolated quantile of sorted samples.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

struct Measured {
    times_ms: Vec<f64>,
    scratch_peak: usize,
    passes: usize,
}

enum Outcome {
    Done(Measured),
    OutOfMemory,
}

fn timed(mut step: impl FnMut() -> lopt_core::Result<(usize, usize)>, warmup: usize, repeats: usize) -> Result<Outcome> {
    let mut peak = 0;
    let mut passes = 0;
    let mut times_ms = Vec::with_capacity(repeats);
    for i in 0..warmup + repeats {
        let t = Instant::now();
        let result = step();
        let ms = t.elapsed().as_secs_f64() * 1e3;
        match result {
            Ok((p, n)) => {
                peak = peak.max(p);
                passes = n;
            }
            Err(Error::OutOfMemory { .. }) => return Ok(Outcome::OutOfMemory),
            Err(e) => return Err(e.into()),
        }
        if i >= warmup {
            times_ms.push(ms);
        }
    }
    Ok(Outcome::Done(Measured {
        times_ms,
        scratch_peak: peak,
        passes,
    }))
}

fn measure(
    args: &BenchArgs,
    optimizer: BenchOptimizer,
    shapes: &[(usize, usize)],
    weights: &lopt_core::engine::LoptWeights,
) -> Result<Outcome> {
    let mut rng = synth::rng(args.seed);
    let mut params = setup::random_tensors(shapes, 1.0, &mut rng);
    let grads = setup::random_tensors(shapes, 1.0, &mut rng);
    let (warmup, repeats) = (args.warmup, args.repeats);
    match optimizer {
        BenchOptimizer::Adam => {
            let mut opt = Adam::new(&params, AdamConfig::default());
            timed(|| opt.step(&mut params, &grads).map(|()| (0, params.len())), warmup, repeats)
        }
        BenchOptimizer::Adafactor => {
            let mut opt = Adafactor::new(&params, AdafactorConfig::default());
            timed(|| opt.step(&mut params, &grads).map(|()| (0, 2 * params.len())), warmup, repeats)
        }
        BenchOptimizer::LoptNaive | BenchOptimizer::LoptFused => {
            let path = match optimizer {
                BenchOptimizer::LoptNaive => ExecPath::Naive,
                _ => ExecPath::Fused,
            };
            let mut h = OptimizerHandle::new(setup::named(params, "p"), OptimizerWeights::Shared(weights.clone()))?
                .with_path(path)
                .with_engine(setup::engine(&args.engine)?);
            timed(
                || {
                    let reports = h.step(&grads, None)?;
                    let peak = reports.iter().map(|r| r.scratch_peak_bytes).max().unwrap_or(0);
                    Ok((peak, reports.iter().map(|r| r.kernel_equivalents).sum()))
                },
                warmup,
                repeats,
            )
        }
    }
}

fn row(args: &BenchArgs, width: usize, depth: usize, optimizer: BenchOptimizer, shapes: &[(usize, usize)], outcome: Outcome) -> BenchRow {
    let mut row = BenchRow {
        schema_version: BENCH_SCHEMA.to_string(),
        workload: args.workload.as_str().to_string(),
        width,
        depth,
        optimizer: optimizer.as_str().to_string(),
        params: shapes.iter().map(|&(r, c)| r * c).sum(),
        tensors: shapes.len(),
        status: STATUS_OOM.to_string(),
        median_ms: None,
        p10_ms: None,
        p90_ms: None,
        scratch_peak_bytes: None,
        passes: None,
    };
    if let Outcome::Done(mut m) = outcome {
        m.times_ms.sort_by(f64::total_cmp);
        row.status = STATUS_OK.to_string();
        row.median_ms = Some(quantile(&m.times_ms, 0.5));
        row.p10_ms = Some(quantile(&m.times_ms, 0.1));
        row.p90_ms = Some(quantile(&m.times_ms, 0.9));
        row.scratch_peak_bytes = Some(m.scratch_peak);
        row.passes = Some(m.passes);
    }
    row
}

pub fn run(args: &BenchArgs) -> Result<()> {
    args.validate()?;
    let weights = setup::weights(&args.weights, args.seed)?;
    let mut out = csv::Writer::from_path(&args.out)?;
    for &width in &args.widths {
        for &depth in &args.depths {
            let shapes = match args.workload {
                Workload::MlpSweep => mlp_shapes(width, depth),
                Workload::TransformerProxy => transformer_shapes(width, depth, args.vocab),
            };
            for &optimizer in &args.optimizers {
                let outcome = measure(args, optimizer, &shapes, &weights)?;
                let row = row(args, width, depth, optimizer, &shapes, outcome);
                eprintln!(
                    "{} width={width} depth={depth} {}: {}",
                    row.workload,
                    row.optimizer,
                    row.median_ms.map_or_else(|| row.status.clone(), |m| format!("{m:.3} ms"))
                );
                out.serialize(&row)?;
                out.flush()?;
            }
        }
    }
    Ok(())
}
