//! Toy training harness.

use std::f32::consts::PI;
use std::path::PathBuf;

use anyhow::{ensure, Result};
use clap::{Args, ValueEnum};
use lopt_core::engine::ExecPath;
use lopt_core::optim::{
    schedule_lr, Adafactor, AdafactorConfig, Adam, AdamConfig, OptimizerHandle, OptimizerWeights, ScheduleConfig, ScheduleKind,
};
use lopt_core::synth;
use lopt_core::tensors::ParamTensor;
use rand::Rng;

use crate::schema::{TrainRow, TRAIN_SCHEMA};
use crate::setup;
use crate::{EngineArgs, WeightsArgs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    /// `0.5 * |theta|^2` over an 8x8 tensor.
    #[value(name = "quadratic")]
    Quadratic,
    /// Full-batch logistic loss of a 2-16-1 tanh MLP on two interleaved half circles.
    #[value(name = "two_moons_mlp")]
    TwoMoonsMlp,
}

impl Task {
    fn as_str(self) -> &'static str {
        match self {
            Task::Quadratic => "quadratic",
            Task::TwoMoonsMlp => "two_moons_mlp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainOptimizer {
    #[value(name = "adam")]
    Adam,
    #[value(name = "adafactor")]
    Adafactor,
    #[value(name = "lopt_naive")]
    LoptNaive,
    #[value(name = "lopt_fused")]
    LoptFused,
}

impl TrainOptimizer {
    fn as_str(self) -> &'static str {
        match self {
            TrainOptimizer::Adam => "adam",
            TrainOptimizer::Adafactor => "adafactor",
            TrainOptimizer::LoptNaive => "lopt_naive",
            TrainOptimizer::LoptFused => "lopt_fused",
        }
    }

    fn default_lr(self) -> f32 {
        match self {
            TrainOptimizer::Adam | TrainOptimizer::Adafactor => 1e-2,
            TrainOptimizer::LoptNaive | TrainOptimizer::LoptFused => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScheduleArg {
    #[value(name = "constant")]
    Constant,
    #[value(name = "cosine")]
    Cosine,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub task: Task,
    #[arg(long, value_enum)]
    pub optimizer: TrainOptimizer,
    #[arg(long, default_value_t = 100)]
    pub steps: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Peak learning rate (1e-2 for adam/adafactor, 1 for learned optimizers).
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long, value_enum, default_value = "constant")]
    pub schedule: ScheduleArg,
    #[arg(long, default_value_t = 0.0)]
    pub min_lr: f32,
    #[arg(long, default_value_t = 0)]
    pub warmup_steps: u64,
    /// Decoupled weight decay for learned optimizers.
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f32,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[command(flatten)]
    pub weights: WeightsArgs,
}

/// Two interleaved half circles with uniform jitter, labels 0 and 1.
pub fn two_moons(n: usize, noise: f32, rng: &mut impl Rng) -> Vec<([f32; 2], f32)> {
    (0..n)
        .map(|i| {
            let t = PI * rng.gen::<f32>();
            let (x, y, label) = if i % 2 == 0 {
                (t.cos(), t.sin(), 0.0)
            } else {
                (1.0 - t.cos(), 0.5 - t.sin(), 1.0)
            };
            let jx = noise * rng.gen_range(-1.0f32..1.0);
            let jy = noise * rng.gen_range(-1.0f32..1.0);
            ([x + jx, y + jy], label)
        })
        .collect()
}

pub const HIDDEN: usize = 16;

/// Loss and gradient for the task's parameter list.
pub trait Objective {
    fn init(&self, rng: &mut impl Rng) -> Vec<ParamTensor>;
    fn loss_and_grad(&self, params: &[&ParamTensor]) -> Result<(f64, Vec<ParamTensor>)>;
}

pub struct Quadratic;

impl Objective for Quadratic {
    fn init(&self, rng: &mut impl Rng) -> Vec<ParamTensor> {
        vec![synth::uniform_tensor(8, 8, 1.0, rng)]
    }

    fn loss_and_grad(&self, params: &[&ParamTensor]) -> Result<(f64, Vec<ParamTensor>)> {
        let theta = params[0];
        let loss = 0.5 * theta.as_slice().iter().map(|&x| x as f64 * x as f64).sum::<f64>();
        Ok((loss, vec![theta.clone()]))
    }
}

pub struct TwoMoons {
    pub data: Vec<([f32; 2], f32)>,
}

impl Objective for TwoMoons {
    /// `w1: 16x2`, `b1: 1x16`, `w2: 1x16`, `b2: 1x1`.
    fn init(&self, rng: &mut impl Rng) -> Vec<ParamTensor> {
        vec![
            synth::uniform_tensor(HIDDEN, 2, 1.0, rng),
            ParamTensor::zeros(1, HIDDEN).expect("small"),
            synth::uniform_tensor(1, HIDDEN, 0.25, rng),
            ParamTensor::zeros(1, 1).expect("small"),
        ]
    }

    fn loss_and_grad(&self, params: &[&ParamTensor]) -> Result<(f64, Vec<ParamTensor>)> {
        let (w1, b1, w2, b2) = (params[0].as_slice(), params[1].as_slice(), params[2].as_slice(), params[3].as_slice()[0]);
        let mut g_w1 = vec![0.0f64; HIDDEN * 2];
        let mut g_b1 = vec![0.0f64; HIDDEN];
        let mut g_w2 = vec![0.0f64; HIDDEN];
        let mut g_b2 = 0.0f64;
        let mut loss = 0.0f64;
        let n = self.data.len() as f64;
        for (x, y) in &self.data {
            let h: Vec<f32> = (0..HIDDEN)
                .map(|j| (w1[2 * j] * x[0] + w1[2 * j + 1] * x[1] + b1[j]).tanh())
                .collect();
            let z = h.iter().zip(w2).map(|(a, b)| a * b).sum::<f32>() + b2;
            let z = z as f64;
            // Stable log(1 + e^z) - y z.
            loss += z.max(0.0) + (-z.abs()).exp().ln_1p() - *y as f64 * z;
            let dz = 1.0 / (1.0 + (-z).exp()) - *y as f64;
            g_b2 += dz;
            for j in 0..HIDDEN {
                g_w2[j] += dz * h[j] as f64;
                let dh = dz * w2[j] as f64 * (1.0 - h[j] as f64 * h[j] as f64);
                g_b1[j] += dh;
                g_w1[2 * j] += dh * x[0] as f64;
                g_w1[2 * j + 1] += dh * x[1] as f64;
            }
        }
        let f = |v: Vec<f64>| v.into_iter().map(|x| (x / n) as f32).collect::<Vec<f32>>();
        Ok((
            loss / n,
            vec![
                ParamTensor::from_vec(HIDDEN, 2, f(g_w1))?,
                ParamTensor::from_vec(1, HIDDEN, f(g_b1))?,
                ParamTensor::from_vec(1, HIDDEN, f(g_w2))?,
                ParamTensor::from_vec(1, 1, f(vec![g_b2]))?,
            ],
        ))
    }
}

enum Stepper {
    Adam(Adam, Vec<ParamTensor>),
    Adafactor(Adafactor, Vec<ParamTensor>),
    Lopt(Box<OptimizerHandle>),
}

impl Stepper {
    fn params(&self) -> Vec<&ParamTensor> {
        match self {
            Stepper::Adam(_, p) | Stepper::Adafactor(_, p) => p.iter().collect(),
            Stepper::Lopt(h) => h.params().iter().map(|(_, p)| p).collect(),
        }
    }

    fn step(&mut self, grads: &[ParamTensor], loss: f32, lr: f32) -> lopt_core::Result<()> {
        match self {
            Stepper::Adam(opt, p) => {
                opt.config.lr = lr;
                opt.step(p, grads)
            }
            Stepper::Adafactor(opt, p) => {
                opt.config.lr = lr;
                opt.step(p, grads)
            }
            Stepper::Lopt(h) => h.step(grads, Some(loss)).map(|_| ()),
        }
    }
}

/// Per-step losses, `steps + 1` rows: the loss before each update and the final loss.
pub fn train(args: &TrainArgs) -> Result<Vec<TrainRow>> {
    ensure!(args.steps >= 1, "--steps must be at least 1");
    let mut rng = synth::rng(args.seed);
    match args.task {
        Task::Quadratic => run_objective(args, &Quadratic, &mut rng),
        Task::TwoMoonsMlp => {
            let task = TwoMoons {
                data: two_moons(256, 0.1, &mut rng),
            };
            run_objective(args, &task, &mut rng)
        }
    }
}

fn run_objective(args: &TrainArgs, task: &impl Objective, rng: &mut impl Rng) -> Result<Vec<TrainRow>> {
    let max_lr = args.lr.unwrap_or_else(|| args.optimizer.default_lr());
    let schedule = ScheduleConfig {
        kind: match args.schedule {
            ScheduleArg::Constant => ScheduleKind::Constant,
            ScheduleArg::Cosine => ScheduleKind::Cosine,
        },
        max_lr,
        min_lr: args.min_lr,
        warmup_steps: args.warmup_steps,
        total_steps: args.steps,
    };
    schedule.validate()?;
    let params = task.init(rng);
    let mut stepper = match args.optimizer {
        TrainOptimizer::Adam => Stepper::Adam(Adam::new(&params, AdamConfig::default()), params),
        TrainOptimizer::Adafactor => Stepper::Adafactor(Adafactor::new(&params, AdafactorConfig::default()), params),
        TrainOptimizer::LoptNaive | TrainOptimizer::LoptFused => {
            let path = match args.optimizer {
                TrainOptimizer::LoptNaive => ExecPath::Naive,
                _ => ExecPath::Fused,
            };
            let weights = setup::weights(&args.weights, args.seed)?;
            let h = OptimizerHandle::new(setup::named(params, "p"), OptimizerWeights::Shared(weights))?
                .with_schedule(schedule)?
                .with_weight_decay(args.weight_decay)?
                .with_path(path)
                .with_engine(setup::engine(&args.engine)?);
            Stepper::Lopt(Box::new(h))
        }
    };

    let mut rows = Vec::with_capacity(args.steps as usize + 1);
    for step in 0..=args.steps {
        let (loss, grads) = task.loss_and_grad(&stepper.params())?;
        let lr = schedule_lr(&schedule, step);
        rows.push(TrainRow {
            schema_version: TRAIN_SCHEMA.to_string(),
            task: args.task.as_str().to_string(),
            optimizer: args.optimizer.as_str().to_string(),
            step,
            loss,
            lr: lr as f64,
        });
        if !loss.is_finite() {
            eprintln!("warning: loss diverged at step {step}");
            break;
        }
        if step == args.steps {
            break;
        }
        if let Err(e) = stepper.step(&grads, loss as f32, lr) {
            eprintln!("warning: training stopped at step {step}: {e}");
            break;
        }
    }
    Ok(rows)
}

pub fn run(args: &TrainArgs) -> Result<()> {
    let rows = train(args)?;
    let mut out = csv::Writer::from_path(&args.out)?;
    for row in &rows {
        out.serialize(row)?;
    }
    out.flush()?;
    if let Some(last) = rows.last() {
        eprintln!("{} {}: step {} loss {:.6}", last.task, last.optimizer, last.step, last.loss);
    }
    Ok(())
}
