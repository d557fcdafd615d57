//! Simulated data-parallel optimizer steps.
//!
//! `N` worker threads and a coordinator exchange messages over channels; no
//! parameter buffer is shared mutably during a step. Every collective is a
//! gather at the coordinator followed by a broadcast or scatter. The trace
//! reports bytes from the ring model and the measured wall time of each phase;
//! [`CommTrace::modeled`] swaps in an analytic time for the communication phases.
//!
//! Three strategies:
//!
//! * all-reduce: gradients are averaged and every worker runs the full step on
//!   its own replica.
//! * reduce-scatter: every tensor is split into contiguous element shards, one
//!   per worker. Workers step their shards only, merging the Adafactor square
//!   sums and the feature statistics across shards, then parameters are
//!   all-gathered.
//! * FSDP all-to-all: each tensor (and its optimizer state) is owned by one
//!   worker. Gradients are routed to owners, owners step whole tensors, and
//!   parameters are all-gathered.
//!
//! The mean gradient is summed in `f64` in worker order and divided by `N` in
//! every strategy, so results differ from a single-device step on the same mean
//! only through reduction order in the sharded statistics.

use std::cell::RefCell;
use std::collections::VecDeque;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::sync::mpsc::{channel, Receiver, Sender};
use std::thread;
use std::time::Instant;

use crate::engine::{apply_pass, stats_pass, Engine, LoptWeights};
use crate::error::{Error, Result};
use crate::features::{FeatureContext, FeatureStats};
use crate::optim::{decay_in_place, step_tensor, OptimizerHandle};
use crate::state::{update_elementwise, update_factors, OptState, SquareSums};
use crate::tensors::ParamTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    AllReduce,
    ReduceScatter,
    FsdpA2a,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::AllReduce, Strategy::ReduceScatter, Strategy::FsdpA2a];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::AllReduce => "all_reduce",
            Strategy::ReduceScatter => "reduce_scatter",
            Strategy::FsdpA2a => "fsdp_a2a",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "allreduce" | "all_reduce" | "all-reduce" => Ok(Strategy::AllReduce),
            "rs" | "reduce_scatter" | "reduce-scatter" => Ok(Strategy::ReduceScatter),
            "a2a" | "fsdp_a2a" | "fsdp-a2a" => Ok(Strategy::FsdpA2a),
            other => Err(Error::InvalidConfig(format!(
                "unknown strategy `{other}` (expected allreduce, rs or a2a)"
            ))),
        }
    }
}

/// Placement of one tensor across workers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Assignment {
    /// Every worker holds and steps the whole tensor.
    Replicated,
    /// Contiguous element ranges, one per worker, in worker order.
    Shards(Vec<Range<usize>>),
    /// One worker holds the optimizer state and steps the tensor.
    Owner(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardPlan {
    pub strategy: Strategy,
    pub workers: usize,
    pub assignment: Vec<Assignment>,
}

impl ShardPlan {
    /// Plan for tensors of the given element counts.
    ///
    /// Reduce-scatter shards differ by at most one element within a tensor, and
    /// the leftover elements rotate across workers so per-worker totals also
    /// differ by at most one. FSDP ownership is greedy: largest tensor first, to
    /// the least loaded worker (lowest index on ties).
    pub fn new(strategy: Strategy, workers: usize, lens: &[usize]) -> Result<Self> {
        if workers == 0 {
            return Err(Error::InvalidConfig("at least one worker is required".into()));
        }
        let assignment = match strategy {
            Strategy::AllReduce => vec![Assignment::Replicated; lens.len()],
            Strategy::ReduceScatter => {
                let mut next_extra = 0;
                lens.iter()
                    .map(|&len| {
                        let (base, rem) = (len / workers, len % workers);
                        let mut start = 0;
                        let ranges = (0..workers)
                            .map(|w| {
                                let extra = (w + workers - next_extra) % workers < rem;
                                let size = base + usize::from(extra);
                                let r = start..start + size;
                                start += size;
                                r
                            })
                            .collect();
                        next_extra = (next_extra + rem) % workers;
                        Assignment::Shards(ranges)
                    })
                    .collect()
            }
            Strategy::FsdpA2a => {
                let mut order: Vec<usize> = (0..lens.len()).collect();
                order.sort_by(|&a, &b| lens[b].cmp(&lens[a]).then(a.cmp(&b)));
                let mut load = vec![0usize; workers];
                let mut owners = vec![0usize; lens.len()];
                for t in order {
                    let w = (0..workers).min_by_key(|&w| (load[w], w)).expect("workers >= 1");
                    load[w] += lens[t];
                    owners[t] = w;
                }
                owners.into_iter().map(Assignment::Owner).collect()
            }
        };
        Ok(Self {
            strategy,
            workers,
            assignment,
        })
    }

    pub fn for_handle(strategy: Strategy, workers: usize, h: &OptimizerHandle) -> Result<Self> {
        Self::new(strategy, workers, &lens(h))
    }

    /// Checks that the plan fits `strategy`, `workers` and tensors of `lens` elements.
    pub fn check(&self, strategy: Strategy, workers: usize, lens: &[usize]) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(format!("shard plan: {msg}")));
        if self.strategy != strategy {
            return bad(format!("built for {}, used for {}", self.strategy, strategy));
        }
        if self.workers != workers {
            return bad(format!("built for {} workers, got {workers}", self.workers));
        }
        if self.assignment.len() != lens.len() {
            return bad(format!("{} assignments for {} tensors", self.assignment.len(), lens.len()));
        }
        for (t, (a, &len)) in self.assignment.iter().zip(lens).enumerate() {
            match (strategy, a) {
                (Strategy::AllReduce, Assignment::Replicated) => {}
                (Strategy::ReduceScatter, Assignment::Shards(ranges)) => {
                    if ranges.len() != workers {
                        return bad(format!("tensor {t} has {} shards", ranges.len()));
                    }
                    let mut next = 0;
                    for r in ranges {
                        if r.start != next || r.end < r.start {
                            return bad(format!("tensor {t} shards are not contiguous"));
                        }
                        next = r.end;
                    }
                    if next != len {
                        return bad(format!("tensor {t} shards cover {next} of {len} elements"));
                    }
                    let sizes = ranges.iter().map(|r| r.len());
                    let (lo, hi) = (sizes.clone().min().unwrap_or(0), sizes.max().unwrap_or(0));
                    if hi - lo > 1 {
                        return bad(format!("tensor {t} shards are uneven ({lo}..{hi})"));
                    }
                }
                (Strategy::FsdpA2a, Assignment::Owner(w)) if *w < workers => {}
                _ => return bad(format!("tensor {t} has assignment {a:?}")),
            }
        }
        Ok(())
    }

    /// Elements each worker steps.
    pub fn elements_per_worker(&self, lens: &[usize]) -> Vec<usize> {
        let mut out = vec![0; self.workers];
        for (a, &len) in self.assignment.iter().zip(lens) {
            match a {
                Assignment::Replicated => out.iter_mut().for_each(|x| *x += len),
                Assignment::Shards(ranges) => {
                    for (x, r) in out.iter_mut().zip(ranges) {
                        *x += r.len();
                    }
                }
                Assignment::Owner(w) => out[*w] += len,
            }
        }
        out
    }

    /// Tensors owned by `worker`, ascending.
    pub fn owned_by(&self, worker: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, a)| **a == Assignment::Owner(worker))
            .map(|(t, _)| t)
            .collect()
    }

    fn shard(&self, t: usize, worker: usize) -> Range<usize> {
        match &self.assignment[t] {
            Assignment::Shards(r) => r[worker].clone(),
            _ => unreachable!("checked plan"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    GradReduce,
    /// Cross-shard merge of square sums and feature statistics (reduce-scatter only).
    StatsAllreduce,
    OptimizerStep,
    ParamGather,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::GradReduce => "grad_reduce",
            Phase::StatsAllreduce => "stats_allreduce",
            Phase::OptimizerStep => "optimizer_step",
            Phase::ParamGather => "param_gather",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseRecord {
    pub phase: Phase,
    pub bytes: u64,
    pub time_ms: f64,
}

/// Analytic collective cost: `latency + bytes / bandwidth` per phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub bandwidth_bytes_per_s: f64,
    pub latency_s: f64,
}

pub const CSV_HEADER: &str = "strategy,N,phase,bytes,time_ms";

#[derive(Debug, Clone, PartialEq)]
pub struct CommTrace {
    pub strategy: Strategy,
    pub workers: usize,
    pub records: Vec<PhaseRecord>,
}

/// Per-worker bytes sent by a ring collective moving `parts` passes over
/// `words` words of `word_bytes` bytes: `parts * words * (N-1) / N`.
fn ring_bytes(words: u64, word_bytes: u64, parts: u64, workers: usize) -> u64 {
    let n = workers as u64;
    parts * words * word_bytes * (n - 1) / n
}

/// Bytes per phase for `strategy` on tensors of `shapes`.
///
/// * all-reduce: gradients all-reduced, `2 P (N-1)/N` words.
/// * reduce-scatter: `P (N-1)/N` words to reduce-scatter gradients, the same to
///   all-gather parameters, plus an all-reduce of `f64` square sums (`rows + cols`
///   per tensor) and feature statistics (`d_feat + 1` per tensor).
/// * FSDP all-to-all: `P (N-1)/N` words routed to owners and the same gathered back.
pub fn expected_bytes(strategy: Strategy, workers: usize, shapes: &[(usize, usize)], d_feat: usize) -> Vec<(Phase, u64)> {
    let p: u64 = shapes.iter().map(|&(r, c)| (r * c) as u64).sum();
    match strategy {
        Strategy::AllReduce => vec![
            (Phase::GradReduce, ring_bytes(p, 4, 2, workers)),
            (Phase::OptimizerStep, 0),
            (Phase::ParamGather, 0),
        ],
        Strategy::ReduceScatter => {
            let stats: u64 = shapes.iter().map(|&(r, c)| (r + c + d_feat + 1) as u64).sum();
            vec![
                (Phase::GradReduce, ring_bytes(p, 4, 1, workers)),
                (Phase::StatsAllreduce, ring_bytes(stats, 8, 2, workers)),
                (Phase::OptimizerStep, 0),
                (Phase::ParamGather, ring_bytes(p, 4, 1, workers)),
            ]
        }
        Strategy::FsdpA2a => vec![
            (Phase::GradReduce, ring_bytes(p, 4, 1, workers)),
            (Phase::OptimizerStep, 0),
            (Phase::ParamGather, ring_bytes(p, 4, 1, workers)),
        ],
    }
}

impl CommTrace {
    fn new(strategy: Strategy, workers: usize) -> Self {
        Self {
            strategy,
            workers,
            records: Vec::new(),
        }
    }

    pub fn phase(&self, phase: Phase) -> Option<&PhaseRecord> {
        self.records.iter().find(|r| r.phase == phase)
    }

    pub fn total_ms(&self) -> f64 {
        self.records.iter().map(|r| r.time_ms).sum()
    }

    /// Checks phases and bytes against [`expected_bytes`].
    pub fn validate(&self, shapes: &[(usize, usize)], d_feat: usize) -> Result<()> {
        let expected = expected_bytes(self.strategy, self.workers, shapes, d_feat);
        let got: Vec<(Phase, u64)> = self.records.iter().map(|r| (r.phase, r.bytes)).collect();
        if got != expected {
            return Err(Error::Distributed(format!(
                "{} trace {got:?} does not match expected {expected:?}",
                self.strategy
            )));
        }
        Ok(())
    }

    /// Copy with every phase that moves bytes timed by `model` instead of the clock.
    pub fn modeled(&self, model: &CostModel) -> Self {
        let mut out = self.clone();
        for r in &mut out.records {
            if r.bytes > 0 {
                r.time_ms = 1e3 * (model.latency_s + r.bytes as f64 / model.bandwidth_bytes_per_s);
            }
        }
        out
    }

    /// Rows without header.
    pub fn csv_rows(&self) -> String {
        self.records
            .iter()
            .map(|r| {
                format!(
                    "{},{},{},{},{:.6}\n",
                    self.strategy,
                    self.workers,
                    r.phase.as_str(),
                    r.bytes,
                    r.time_ms
                )
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        format!("{CSV_HEADER}\n{}", self.csv_rows())
    }
}

/// Result of one distributed step; the parameters and states are written back
/// into the handle.
#[derive(Debug, Clone, PartialEq)]
pub struct DistOutcome {
    pub trace: CommTrace,
    /// Elements stepped by each worker.
    pub stepped_elements: Vec<usize>,
    /// Optimizer-state bytes resident on each worker during the step.
    pub state_bytes: Vec<usize>,
}

/// Sums partial statistics from disjoint shards of one tensor, in order.
pub fn normalization_across_shards(parts: &[FeatureStats]) -> Result<FeatureStats> {
    let (first, rest) = parts
        .split_first()
        .ok_or_else(|| Error::InvalidConfig("no partial statistics to merge".into()))?;
    let mut out = first.clone();
    for p in rest {
        out.merge(p)?;
    }
    Ok(out)
}

/// Elementwise mean of `parts[w][range]` over workers, summed in `f64` in worker order.
fn mean_range(parts: &[&[f32]], range: Range<usize>) -> Vec<f32> {
    let mut acc = vec![0.0f64; range.len()];
    for p in parts {
        for (a, &x) in acc.iter_mut().zip(&p[range.clone()]) {
            *a += x as f64;
        }
    }
    let n = parts.len() as f64;
    acc.into_iter().map(|a| (a / n) as f32).collect()
}

fn mean_tensor(parts: &[&ParamTensor]) -> Result<ParamTensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidConfig("at least one worker is required".into()))?;
    for p in parts {
        p.ensure_shape(first.shape())?;
    }
    let slices: Vec<&[f32]> = parts.iter().map(|p| p.as_slice()).collect();
    ParamTensor::from_vec(first.rows(), first.cols(), mean_range(&slices, 0..first.len()))
}

/// Mean of per-worker gradient sets, as used by every strategy.
pub fn mean_gradients(per_worker: &[Vec<ParamTensor>]) -> Result<Vec<ParamTensor>> {
    let first = per_worker
        .first()
        .ok_or_else(|| Error::InvalidConfig("at least one worker is required".into()))?;
    for set in per_worker {
        if set.len() != first.len() {
            return Err(Error::CountMismatch {
                expected: first.len(),
                got: set.len(),
            });
        }
    }
    (0..first.len())
        .map(|t| mean_tensor(&per_worker.iter().map(|s| &s[t]).collect::<Vec<_>>()))
        .collect()
}

fn lens(h: &OptimizerHandle) -> Vec<usize> {
    h.params.iter().map(|(_, p)| p.len()).collect()
}

fn shapes(h: &OptimizerHandle) -> Vec<(usize, usize)> {
    h.params.iter().map(|(_, p)| p.shape()).collect()
}

fn check_inputs(h: &OptimizerHandle, per_worker: &[Vec<ParamTensor>]) -> Result<usize> {
    if per_worker.is_empty() {
        return Err(Error::InvalidConfig("at least one worker is required".into()));
    }
    for set in per_worker {
        h.validate_grads(set)?;
    }
    Ok(per_worker.len())
}

fn tensor_weights(h: &OptimizerHandle) -> Result<Vec<&LoptWeights>> {
    h.params.iter().map(|(name, _)| h.weights.get(name)).collect()
}

// Messages between workers and the coordinator.
#[derive(Clone)]
enum Msg {
    Grads(Vec<ParamTensor>),
    Slices(Vec<Vec<f32>>),
    Routed(Vec<(usize, Vec<ParamTensor>)>),
    Sums(Vec<SquareSums>),
    Stats(Vec<FeatureStats>),
    Params(Vec<(usize, ParamTensor)>),
    Done,
    Failed(String),
}

impl Msg {
    fn kind(&self) -> &'static str {
        match self {
            Msg::Grads(_) => "Grads",
            Msg::Slices(_) => "Slices",
            Msg::Routed(_) => "Routed",
            Msg::Sums(_) => "Sums",
            Msg::Stats(_) => "Stats",
            Msg::Params(_) => "Params",
            Msg::Done => "Done",
            Msg::Failed(_) => "Failed",
        }
    }
}

macro_rules! expect {
    ($msg:expr, $variant:ident) => {
        match $msg {
            Msg::$variant(x) => Ok(x),
            other => Err(Error::Distributed(format!(
                "expected {} message, got {}",
                stringify!($variant),
                other.kind()
            ))),
        }
    };
}

fn expect_done(msg: Msg) -> Result<()> {
    match msg {
        Msg::Done => Ok(()),
        other => Err(Error::Distributed(format!("expected Done message, got {}", other.kind()))),
    }
}

struct Link {
    id: usize,
    outbox: Sender<(usize, Msg)>,
    inbox: Receiver<Msg>,
}

impl Link {
    fn send(&self, msg: Msg) -> Result<()> {
        self.outbox
            .send((self.id, msg))
            .map_err(|_| Error::Distributed("coordinator hung up".into()))
    }

    fn recv(&self) -> Result<Msg> {
        self.inbox
            .recv()
            .map_err(|_| Error::Distributed("coordinator hung up".into()))
    }
}

struct Coordinator {
    inbox: Receiver<(usize, Msg)>,
    outboxes: Vec<Sender<Msg>>,
    // Messages that arrived ahead of the phase being gathered.
    early: RefCell<Vec<VecDeque<Msg>>>,
}

impl Coordinator {
    /// The next message from every worker, in worker order.
    fn gather(&self) -> Result<Vec<Msg>> {
        let n = self.outboxes.len();
        let mut early = self.early.borrow_mut();
        let mut slots: Vec<Option<Msg>> = early.iter_mut().map(VecDeque::pop_front).collect();
        while slots.iter().any(Option::is_none) {
            let (id, msg) = self
                .inbox
                .recv()
                .map_err(|_| Error::Distributed("all workers hung up".into()))?;
            if let Msg::Failed(e) = msg {
                return Err(Error::Distributed(format!("worker {id}: {e}")));
            }
            if id >= n {
                return Err(Error::Distributed(format!("message from unknown worker {id}")));
            } else if slots[id].is_none() {
                slots[id] = Some(msg);
            } else {
                early[id].push_back(msg);
            }
        }
        for (id, m) in slots.iter().enumerate() {
            if let Some(Msg::Failed(e)) = m {
                return Err(Error::Distributed(format!("worker {id}: {e}")));
            }
        }
        Ok(slots.into_iter().map(|m| m.expect("filled above")).collect())
    }

    fn send(&self, to: usize, msg: Msg) -> Result<()> {
        self.outboxes[to]
            .send(msg)
            .map_err(|_| Error::Distributed(format!("worker {to} hung up")))
    }

    fn broadcast(&self, msg: Msg) -> Result<()> {
        for to in 0..self.outboxes.len() {
            self.send(to, msg.clone())?;
        }
        Ok(())
    }

    fn gather_done(&self) -> Result<()> {
        self.gather()?.into_iter().try_for_each(expect_done)
    }
}

/// Spawns one thread per seed running `worker` and runs `coordinator` on the
/// calling thread. A failing worker reports to the coordinator, whose error
/// then closes every channel so the remaining workers exit.
fn run_workers<S, T, R>(
    seeds: Vec<S>,
    worker: impl Fn(&Link, S) -> Result<T> + Sync,
    coordinator: impl FnOnce(&Coordinator) -> Result<R>,
) -> Result<(R, Vec<T>)>
where
    S: Send,
    T: Send,
{
    let (to_root, inbox) = channel();
    let mut outboxes = Vec::with_capacity(seeds.len());
    let mut links = Vec::with_capacity(seeds.len());
    for id in 0..seeds.len() {
        let (tx, rx) = channel();
        outboxes.push(tx);
        links.push(Link {
            id,
            outbox: to_root.clone(),
            inbox: rx,
        });
    }
    drop(to_root);
    thread::scope(|s| {
        let worker = &worker;
        let handles: Vec<_> = links
            .into_iter()
            .zip(seeds)
            .map(|(link, seed)| {
                s.spawn(move || {
                    let out = worker(&link, seed);
                    if let Err(e) = &out {
                        let _ = link.send(Msg::Failed(e.to_string()));
                    }
                    out
                })
            })
            .collect();
        let early = RefCell::new((0..outboxes.len()).map(|_| VecDeque::new()).collect());
        let coord = Coordinator { inbox, outboxes, early };
        let result = coordinator(&coord);
        drop(coord);
        let outs: Vec<Result<T>> = handles
            .into_iter()
            .map(|h| {
                h.join()
                    .map_err(|_| Error::Distributed("worker panicked".into()))
                    .and_then(|r| r)
            })
            .collect();
        let result = result?;
        Ok((result, outs.into_iter().collect::<Result<Vec<T>>>()?))
    })
}

fn millis(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

struct TraceBuilder {
    trace: CommTrace,
    bytes: Vec<(Phase, u64)>,
}

impl TraceBuilder {
    fn new(strategy: Strategy, workers: usize, h: &OptimizerHandle) -> Self {
        Self {
            trace: CommTrace::new(strategy, workers),
            bytes: expected_bytes(strategy, workers, &shapes(h), h.spec.d_feat),
        }
    }

    fn push(&mut self, phase: Phase, time_ms: f64) {
        let bytes = self
            .bytes
            .iter()
            .find(|(p, _)| *p == phase)
            .map(|&(_, b)| b)
            .unwrap_or(0);
        self.trace.records.push(PhaseRecord { phase, bytes, time_ms });
    }
}

fn all_params(params: &[ParamTensor]) -> Msg {
    Msg::Params(params.iter().cloned().enumerate().collect())
}

/// Every worker runs the full step on its own replica; replicas must agree bitwise.
pub fn run_allreduce_step(h: &mut OptimizerHandle, per_worker: &[Vec<ParamTensor>]) -> Result<DistOutcome> {
    let n = check_inputs(h, per_worker)?;
    let mut trace = TraceBuilder::new(Strategy::AllReduce, n, h);
    let seeds: Vec<(OptimizerHandle, &Vec<ParamTensor>)> = per_worker
        .iter()
        .map(|grads| {
            let mut replica = h.clone();
            replica.engine = h.engine.fork();
            (replica, grads)
        })
        .collect();

    let worker = |link: &Link, (mut replica, grads): (OptimizerHandle, &Vec<ParamTensor>)| {
        link.send(Msg::Grads(grads.clone()))?;
        let mean = expect!(link.recv()?, Grads)?;
        replica.step(&mean, None)?;
        let params: Vec<ParamTensor> = replica.params.iter().map(|(_, p)| p.clone()).collect();
        link.send(all_params(&params))?;
        Ok(replica)
    };

    let (_, mut replicas) = run_workers(seeds, worker, |c| {
        let t = Instant::now();
        let sets = c
            .gather()?
            .into_iter()
            .map(|m| expect!(m, Grads))
            .collect::<Result<Vec<_>>>()?;
        c.broadcast(Msg::Grads(mean_gradients(&sets)?))?;
        trace.push(Phase::GradReduce, millis(t));

        let t = Instant::now();
        let finals = c
            .gather()?
            .into_iter()
            .map(|m| expect!(m, Params))
            .collect::<Result<Vec<_>>>()?;
        for (w, f) in finals.iter().enumerate().skip(1) {
            let same = f.iter().zip(&finals[0]).all(|((_, a), (_, b))| a.bitwise_eq(b));
            if !same {
                return Err(Error::Distributed(format!("replica {w} diverged from replica 0")));
            }
        }
        trace.push(Phase::OptimizerStep, millis(t));
        trace.push(Phase::ParamGather, 0.0);
        Ok(())
    })?;

    let state_bytes: Vec<usize> = replicas.iter().map(|r| r.state_bytes()).collect();
    let replica = replicas.swap_remove(0);
    h.params = replica.params;
    h.states = replica.states;
    h.step = replica.step;
    Ok(DistOutcome {
        trace: trace.trace,
        stepped_elements: vec![lens(h).iter().sum(); n],
        state_bytes,
    })
}

// One worker's slice of one tensor under reduce-scatter.
struct ShardState {
    shape: (usize, usize),
    range: Range<usize>,
    param: Vec<f32>,
    momentum: [Vec<f32>; 3],
    second_moment: Vec<f32>,
    row_factors: [Vec<f32>; 3],
    col_factors: [Vec<f32>; 3],
    step: u64,
}

impl ShardState {
    fn cut(param: &ParamTensor, state: &OptState, range: Range<usize>) -> Self {
        Self {
            shape: param.shape(),
            param: param.as_slice()[range.clone()].to_vec(),
            momentum: std::array::from_fn(|i| state.momentum[i][range.clone()].to_vec()),
            second_moment: state.second_moment[range.clone()].to_vec(),
            row_factors: state.row_factors.clone(),
            col_factors: state.col_factors.clone(),
            step: state.step,
            range,
        }
    }

    fn size_bytes(&self) -> usize {
        let factors = 3 * (self.shape.0 + self.shape.1);
        (4 * self.range.len() + factors) * 4 + 8
    }

    fn context<'a>(&'a self, spec: &'a crate::features::FeatureSetSpec, g: &'a [f32]) -> Result<FeatureContext<'a>> {
        let [m0, m1, m2] = &self.momentum;
        let [r0, r1, r2] = &self.row_factors;
        let [c0, c1, c2] = &self.col_factors;
        FeatureContext::for_range(
            spec,
            self.shape,
            self.range.start,
            g,
            [m0, m1, m2],
            &self.second_moment,
            [r0, r1, r2],
            [c0, c1, c2],
            self.step,
        )
    }
}

/// Each worker steps one contiguous shard of every tensor. Runs the two fused
/// passes per shard regardless of the handle's execution path.
pub fn run_reduce_scatter_step(
    h: &mut OptimizerHandle,
    per_worker: &[Vec<ParamTensor>],
    plan: &ShardPlan,
) -> Result<DistOutcome> {
    let n = check_inputs(h, per_worker)?;
    let lens = lens(h);
    plan.check(Strategy::ReduceScatter, n, &lens)?;
    let weights = tensor_weights(h)?;
    let (lr, lambda, spec) = (h.current_lr(), h.weight_decay, &h.spec);
    let mut trace = TraceBuilder::new(Strategy::ReduceScatter, n, h);

    let seeds: Vec<(Vec<ShardState>, &Vec<ParamTensor>, Engine)> = (0..n)
        .map(|w| {
            let shards = h
                .params
                .iter()
                .zip(&h.states)
                .enumerate()
                .map(|(t, ((_, p), s))| ShardState::cut(p, s, plan.shard(t, w)))
                .collect();
            (shards, &per_worker[w], h.engine.fork())
        })
        .collect();

    let worker = |link: &Link, (mut shards, grads, engine): (Vec<ShardState>, &Vec<ParamTensor>, Engine)| {
        let threads = engine.config().workers;
        link.send(Msg::Grads(grads.clone()))?;
        let g = expect!(link.recv()?, Slices)?;

        let mut sums = Vec::with_capacity(shards.len());
        for ((s, g), lw) in shards.iter_mut().zip(&g).zip(&weights) {
            let [m0, m1, m2] = &mut s.momentum;
            update_elementwise([m0, m1, m2], &mut s.second_moment, g, &lw.betas);
            let mut local = SquareSums::zeros(s.shape.0, s.shape.1);
            local.accumulate(s.shape.1, s.range.start, g);
            sums.push(local);
        }
        link.send(Msg::Sums(sums))?;
        let merged = expect!(link.recv()?, Sums)?;

        let mut stats = Vec::with_capacity(shards.len());
        for ((s, sums), lw) in shards.iter_mut().zip(&merged).zip(&weights) {
            update_factors(&mut s.row_factors, &mut s.col_factors, sums, &lw.betas);
            s.step += 1;
        }
        for (s, g) in shards.iter().zip(&g) {
            let ctx = s.context(spec, g)?;
            stats.push(stats_pass(&ctx, &s.param, threads, engine.arena())?);
        }
        link.send(Msg::Stats(stats))?;
        let merged = expect!(link.recv()?, Stats)?;

        for (((s, g), st), lw) in shards.iter_mut().zip(&g).zip(&merged).zip(&weights) {
            let scales = st.scales(spec.eps_norm)?;
            let mut param = std::mem::take(&mut s.param);
            let ctx = s.context(spec, g)?;
            apply_pass(&ctx, &mut param, &scales, lw, lr, threads, engine.arena())?;
            decay_in_place(&mut param, lr, lambda);
            s.param = param;
        }
        link.send(Msg::Done)?;

        link.send(Msg::Slices(shards.iter().map(|s| s.param.clone()).collect()))?;
        expect!(link.recv()?, Params)?;
        link.send(Msg::Done)?;
        Ok(shards)
    };

    let (params, outs) = run_workers(seeds, worker, |c| {
        let t = Instant::now();
        let sets = c
            .gather()?
            .into_iter()
            .map(|m| expect!(m, Grads))
            .collect::<Result<Vec<_>>>()?;
        for w in 0..n {
            let slices = (0..lens.len())
                .map(|t| {
                    let parts: Vec<&[f32]> = sets.iter().map(|s| s[t].as_slice()).collect();
                    mean_range(&parts, plan.shard(t, w))
                })
                .collect();
            c.send(w, Msg::Slices(slices))?;
        }
        trace.push(Phase::GradReduce, millis(t));

        let t_step = Instant::now();
        let t = Instant::now();
        let parts = c
            .gather()?
            .into_iter()
            .map(|m| expect!(m, Sums))
            .collect::<Result<Vec<_>>>()?;
        let merged = h
            .params
            .iter()
            .enumerate()
            .map(|(t, (_, p))| {
                let mut acc = SquareSums::zeros(p.rows(), p.cols());
                parts.iter().for_each(|w| acc.merge(&w[t]));
                acc
            })
            .collect();
        c.broadcast(Msg::Sums(merged))?;
        let mut stats_ms = millis(t);

        let t = Instant::now();
        let parts = c
            .gather()?
            .into_iter()
            .map(|m| expect!(m, Stats))
            .collect::<Result<Vec<_>>>()?;
        let merged = (0..lens.len())
            .map(|t| normalization_across_shards(&parts.iter().map(|w| w[t].clone()).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        c.broadcast(Msg::Stats(merged))?;
        stats_ms += millis(t);
        c.gather_done()?;
        trace.push(Phase::StatsAllreduce, stats_ms);
        trace.push(Phase::OptimizerStep, millis(t_step) - stats_ms);

        let t = Instant::now();
        let parts = c
            .gather()?
            .into_iter()
            .map(|m| expect!(m, Slices))
            .collect::<Result<Vec<_>>>()?;
        let params = h
            .params
            .iter()
            .enumerate()
            .map(|(t, (_, p))| {
                let data: Vec<f32> = parts.iter().flat_map(|w| w[t].iter().copied()).collect();
                ParamTensor::from_vec(p.rows(), p.cols(), data)
            })
            .collect::<Result<Vec<_>>>()?;
        c.broadcast(all_params(&params))?;
        c.gather_done()?;
        trace.push(Phase::ParamGather, millis(t));
        Ok(params)
    })?;

    let stepped_elements = plan.elements_per_worker(&lens);
    let state_bytes = outs.iter().map(|w| w.iter().map(ShardState::size_bytes).sum()).collect();
    for (t, ((_, p), state)) in h.params.iter_mut().zip(&mut h.states).enumerate() {
        let concat = |f: &dyn Fn(&ShardState) -> &[f32]| -> Vec<f32> {
            outs.iter().flat_map(|w| f(&w[t]).iter().copied()).collect()
        };
        for i in 0..3 {
            state.momentum[i] = concat(&|s| &s.momentum[i]);
        }
        state.second_moment = concat(&|s| &s.second_moment);
        state.row_factors = outs[0][t].row_factors.clone();
        state.col_factors = outs[0][t].col_factors.clone();
        state.step = outs[0][t].step;
        *p = params[t].clone();
    }
    h.step += 1;
    Ok(DistOutcome {
        trace: trace.trace,
        stepped_elements,
        state_bytes,
    })
}

/// Each tensor and its optimizer state live on one owner, which receives every
/// worker's gradient for it and steps the whole tensor.
pub fn run_fsdp_a2a_step(h: &mut OptimizerHandle, per_worker: &[Vec<ParamTensor>], plan: &ShardPlan) -> Result<DistOutcome> {
    let n = check_inputs(h, per_worker)?;
    let lens = lens(h);
    plan.check(Strategy::FsdpA2a, n, &lens)?;
    let weights = tensor_weights(h)?;
    let (lr, lambda, spec, path) = (h.current_lr(), h.weight_decay, &h.spec, h.path);
    let names: Vec<&str> = h.params.iter().map(|(name, _)| name.as_str()).collect();
    let mut trace = TraceBuilder::new(Strategy::FsdpA2a, n, h);

    type Owned = Vec<(usize, ParamTensor, OptState)>;
    let seeds: Vec<(Owned, &Vec<ParamTensor>, Engine)> = (0..n)
        .map(|w| {
            let owned = plan
                .owned_by(w)
                .into_iter()
                .map(|t| (t, h.params[t].1.clone(), h.states[t].clone()))
                .collect();
            (owned, &per_worker[w], h.engine.fork())
        })
        .collect();

    let worker = |link: &Link, (mut owned, grads, engine): (Owned, &Vec<ParamTensor>, Engine)| {
        link.send(Msg::Grads(grads.clone()))?;
        let routed = expect!(link.recv()?, Routed)?;
        for ((t, param, state), (rt, parts)) in owned.iter_mut().zip(&routed) {
            if t != rt {
                return Err(Error::Distributed(format!("received tensor {rt}, expected {t}")));
            }
            let g = mean_tensor(&parts.iter().collect::<Vec<_>>())?;
            step_tensor(&engine, path, spec, names[*t], param, &g, state, weights[*t], lr, lambda)?;
        }
        link.send(Msg::Done)?;

        link.send(Msg::Params(owned.iter().map(|(t, p, _)| (*t, p.clone())).collect()))?;
        expect!(link.recv()?, Params)?;
        link.send(Msg::Done)?;
        Ok(owned)
    };

    let (params, outs) = run_workers(seeds, worker, |c| {
        let t = Instant::now();
        let sets = c
            .gather()?
            .into_iter()
            .map(|m| expect!(m, Grads))
            .collect::<Result<Vec<_>>>()?;
        for w in 0..n {
            let routed = plan
                .owned_by(w)
                .into_iter()
                .map(|t| (t, sets.iter().map(|s| s[t].clone()).collect()))
                .collect();
            c.send(w, Msg::Routed(routed))?;
        }
        trace.push(Phase::GradReduce, millis(t));

        let t = Instant::now();
        c.gather_done()?;
        trace.push(Phase::OptimizerStep, millis(t));

        let t = Instant::now();
        let mut slots: Vec<Option<ParamTensor>> = vec![None; lens.len()];
        for m in c.gather()? {
            for (t, p) in expect!(m, Params)? {
                if t >= slots.len() || slots[t].replace(p).is_some() {
                    return Err(Error::Distributed(format!("unexpected parameters for tensor {t}")));
                }
            }
        }
        let params = slots
            .into_iter()
            .enumerate()
            .map(|(t, p)| p.ok_or_else(|| Error::Distributed(format!("tensor {t} was not stepped"))))
            .collect::<Result<Vec<_>>>()?;
        c.broadcast(all_params(&params))?;
        c.gather_done()?;
        trace.push(Phase::ParamGather, millis(t));
        Ok(params)
    })?;

    let state_bytes = outs
        .iter()
        .map(|w| w.iter().map(|(_, _, s)| s.size_bytes()).sum())
        .collect();
    for (t, p) in params.into_iter().enumerate() {
        h.params[t].1 = p;
    }
    for (t, _, state) in outs.into_iter().flatten() {
        h.states[t] = state;
    }
    h.step += 1;
    Ok(DistOutcome {
        trace: trace.trace,
        stepped_elements: plan.elements_per_worker(&lens),
        state_bytes,
    })
}

/// Runs `strategy` with the default plan for `per_worker.len()` workers.
pub fn run_step(strategy: Strategy, h: &mut OptimizerHandle, per_worker: &[Vec<ParamTensor>]) -> Result<DistOutcome> {
    match strategy {
        Strategy::AllReduce => run_allreduce_step(h, per_worker),
        Strategy::ReduceScatter => {
            let plan = ShardPlan::for_handle(strategy, per_worker.len().max(1), h)?;
            run_reduce_scatter_step(h, per_worker, &plan)
        }
        Strategy::FsdpA2a => {
            let plan = ShardPlan::for_handle(strategy, per_worker.len().max(1), h)?;
            run_fsdp_a2a_step(h, per_worker, &plan)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{max_relative_deviation, DEFAULT_HIDDEN};
    use crate::features::FeatureSetId;
    use crate::optim::OptimizerWeights;
    use crate::synth;
    use proptest::prelude::*;
    use super::Strategy;

    fn model(shapes: &[(usize, usize)], seed: u64) -> OptimizerHandle {
        let mut rng = synth::rng(seed);
        let params = shapes
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| (format!("t{i}"), synth::uniform_tensor(r, c, 1.0, &mut rng)))
            .collect();
        let w = LoptWeights::random(FeatureSetId::SmallFcLopt, &DEFAULT_HIDDEN, seed).unwrap();
        OptimizerHandle::new(params, OptimizerWeights::Shared(w))
            .unwrap()
            .with_weight_decay(0.01)
            .unwrap()
    }

    fn worker_grads(h: &OptimizerHandle, n: usize, seed: u64) -> Vec<Vec<ParamTensor>> {
        let mut rng = synth::rng(seed);
        (0..n)
            .map(|_| {
                h.params()
                    .iter()
                    .map(|(_, p)| synth::uniform_tensor(p.rows(), p.cols(), 1.0, &mut rng))
                    .collect()
            })
            .collect()
    }

    // Independent oracle: plain f64 mean, then a single-device step.
    fn oracle(h: &OptimizerHandle, grads: &[Vec<ParamTensor>]) -> OptimizerHandle {
        let n = grads.len() as f64;
        let mean: Vec<ParamTensor> = (0..grads[0].len())
            .map(|t| {
                let (r, c) = grads[0][t].shape();
                let data = (0..r * c)
                    .map(|k| (grads.iter().map(|g| g[t].as_slice()[k] as f64).sum::<f64>() / n) as f32)
                    .collect();
                ParamTensor::from_vec(r, c, data).unwrap()
            })
            .collect();
        let mut out = h.clone();
        out.step(&mean, None).unwrap();
        out
    }

    fn worst(a: &OptimizerHandle, b: &OptimizerHandle) -> f64 {
        a.params()
            .iter()
            .zip(b.params())
            .map(|((_, x), (_, y))| max_relative_deviation(x.as_slice(), y.as_slice()))
            .fold(0.0, f64::max)
    }

    fn bitwise(a: &OptimizerHandle, b: &OptimizerHandle) -> bool {
        a.params().iter().zip(b.params()).all(|((_, x), (_, y))| x.bitwise_eq(y)) && a.states() == b.states()
    }

    const EIGHT: [(usize, usize); 8] = [(12, 10); 8];

    #[test]
    fn allreduce_single_worker_is_plain_step() {
        let h0 = model(&[(7, 5), (1, 9)], 1);
        let g = worker_grads(&h0, 1, 2);
        let mut h = h0.clone();
        let out = run_allreduce_step(&mut h, &g).unwrap();
        let mut plain = h0.clone();
        plain.step(&g[0], None).unwrap();
        assert!(bitwise(&h, &plain));
        assert_eq!(h.step_count(), 1);
        out.trace.validate(&shapes(&h), h.spec().d_feat).unwrap();
    }

    #[test]
    fn allreduce_identical_grads_match_one_worker() {
        let h0 = model(&[(7, 5), (3, 3)], 3);
        let g = worker_grads(&h0, 1, 4);
        let mut four = h0.clone();
        run_allreduce_step(&mut four, &vec![g[0].clone(); 4]).unwrap();
        let mut one = h0.clone();
        run_allreduce_step(&mut one, &g).unwrap();
        assert!(bitwise(&four, &one));
    }

    #[test]
    fn all_strategies_match_oracle() {
        for n in [1, 2, 4] {
            let h0 = model(&EIGHT, 5 + n as u64);
            let g = worker_grads(&h0, n, 6);
            let want = oracle(&h0, &g);
            for s in Strategy::ALL {
                let mut h = h0.clone();
                let out = run_step(s, &mut h, &g).unwrap();
                let dev = worst(&h, &want);
                assert!(dev <= 1e-6, "{s} N={n}: {dev}");
                out.trace.validate(&shapes(&h), h.spec().d_feat).unwrap();
                assert_eq!(h.step_count(), 1);
            }
        }
    }

    #[test]
    fn reduce_scatter_single_worker_is_bitwise_allreduce() {
        let h0 = model(&[(9, 4), (5, 1)], 7);
        let g = worker_grads(&h0, 1, 8);
        let mut a = h0.clone();
        run_allreduce_step(&mut a, &g).unwrap();
        let mut b = h0.clone();
        run_step(Strategy::ReduceScatter, &mut b, &g).unwrap();
        assert!(bitwise(&a, &b));
    }

    #[test]
    fn reduce_scatter_balances_elements() {
        let h0 = model(&EIGHT, 9);
        let g = worker_grads(&h0, 4, 10);
        let mut h = h0.clone();
        let out = run_step(Strategy::ReduceScatter, &mut h, &g).unwrap();
        assert_eq!(out.stepped_elements, vec![2 * 120; 4]);
        let mut again = h.clone();
        run_step(Strategy::ReduceScatter, &mut again, &g).unwrap();
        let mut reference = h.clone();
        run_allreduce_step(&mut reference, &g).unwrap();
        assert!(worst(&again, &reference) <= 1e-6);
    }

    #[test]
    fn fsdp_two_tensors_partition_state() {
        let h0 = model(&[(6, 6), (6, 6)], 11);
        let plan = ShardPlan::for_handle(Strategy::FsdpA2a, 2, &h0).unwrap();
        assert_eq!(plan.owned_by(0), vec![0]);
        assert_eq!(plan.owned_by(1), vec![1]);
        let g = worker_grads(&h0, 2, 12);
        let mut h = h0.clone();
        let out = run_fsdp_a2a_step(&mut h, &g, &plan).unwrap();
        assert_eq!(out.state_bytes, vec![h0.states()[0].size_bytes(), h0.states()[1].size_bytes()]);
        assert_eq!(out.state_bytes.iter().sum::<usize>(), h0.state_bytes());
        let mut ar = h0.clone();
        let replicated = run_allreduce_step(&mut ar, &g).unwrap();
        assert_eq!(replicated.state_bytes.iter().sum::<usize>(), 2 * h0.state_bytes());
    }

    #[test]
    fn fsdp_is_bitwise_single_device_on_mean() {
        let h0 = model(&[(8, 3), (2, 9), (5, 5)], 13);
        let g = worker_grads(&h0, 4, 14);
        let mut h = h0.clone();
        run_step(Strategy::FsdpA2a, &mut h, &g).unwrap();
        let mut plain = h0.clone();
        plain.step(&mean_gradients(&g).unwrap(), None).unwrap();
        assert!(bitwise(&h, &plain));
    }

    #[test]
    fn shape_mismatch_across_workers_is_rejected() {
        let h0 = model(&[(4, 4)], 15);
        let mut g = worker_grads(&h0, 2, 16);
        g[1][0] = ParamTensor::zeros(4, 3).unwrap();
        for s in Strategy::ALL {
            let mut h = h0.clone();
            assert!(matches!(run_step(s, &mut h, &g), Err(Error::ShapeMismatch { .. })));
            assert!(bitwise(&h, &h0));
        }
    }

    #[test]
    fn plan_mismatch_is_rejected() {
        let h0 = model(&[(4, 4), (2, 2)], 17);
        let g = worker_grads(&h0, 2, 18);
        let wrong_n = ShardPlan::for_handle(Strategy::ReduceScatter, 3, &h0).unwrap();
        let wrong_kind = ShardPlan::for_handle(Strategy::FsdpA2a, 2, &h0).unwrap();
        let mut h = h0.clone();
        assert!(run_reduce_scatter_step(&mut h, &g, &wrong_n).is_err());
        assert!(run_reduce_scatter_step(&mut h, &g, &wrong_kind).is_err());
        let mut short = ShardPlan::for_handle(Strategy::ReduceScatter, 2, &h0).unwrap();
        short.assignment[0] = Assignment::Shards(vec![0..8, 8..15]);
        assert!(run_reduce_scatter_step(&mut h, &g, &short).is_err());
        assert!(bitwise(&h, &h0));
    }

    #[test]
    fn worker_failure_is_reported() {
        let base = model(&[(4, 4), (3, 3)], 19);
        let w = base.weights_for("t0").unwrap();
        let mut layers = w.layers().to_vec();
        let last = layers.pop().unwrap();
        let mut bias = last.bias().to_vec();
        bias[1] = 1e6;
        layers.push(crate::engine::DenseLayer::new(last.weight().clone(), bias).unwrap());
        let blown = LoptWeights::new(w.feature_set(), layers).unwrap();
        let h0 = OptimizerHandle::new(base.params().to_vec(), OptimizerWeights::Shared(blown)).unwrap();
        let g = worker_grads(&h0, 2, 20);
        for s in Strategy::ALL {
            let mut h = h0.clone();
            let err = run_step(s, &mut h, &g).unwrap_err();
            assert!(matches!(err, Error::Distributed(_) | Error::UpdateOverflow { .. }), "{s}: {err}");
            assert!(bitwise(&h, &h0));
        }
    }

    #[test]
    fn normalization_merge_examples() {
        let one = FeatureStats {
            sumsq: vec![1.0, 2.0],
            count: 3,
        };
        assert_eq!(normalization_across_shards(std::slice::from_ref(&one)).unwrap(), one);
        assert!(normalization_across_shards(&[]).is_err());

        let h = model(&[(4, 6)], 21);
        let spec = h.spec().clone();
        let g = ParamTensor::new(4, 6, 0.5).unwrap();
        let mut state = OptState::new(4, 6).unwrap();
        state.step(&g, &crate::state::BetaConfig::uniform(0.9)).unwrap();
        let w = ParamTensor::new(4, 6, 2.0).unwrap();
        let arena = crate::engine::ScratchArena::unlimited();
        let whole = stats_pass(&FeatureContext::new(&g, &state, &spec).unwrap(), w.as_slice(), 1, &arena).unwrap();
        let halves: Vec<FeatureStats> = [0..12, 12..24]
            .into_iter()
            .map(|r| {
                let s = ShardState::cut(&w, &state, r.clone());
                let ctx = s.context(&spec, &g.as_slice()[r]).unwrap();
                stats_pass(&ctx, &s.param, 1, &arena).unwrap()
            })
            .collect();
        assert_eq!(normalization_across_shards(&halves).unwrap(), whole);
    }

    #[test]
    fn normalization_four_random_shards() {
        let case = synth::random_case(37, 29, 22, &crate::state::BetaConfig::uniform(0.9));
        let h = model(&[(1, 1)], 23);
        let spec = h.spec();
        let arena = crate::engine::ScratchArena::unlimited();
        // Oracle: whole-tensor sums of squared features, element by element.
        let ctx = FeatureContext::new(&case.g, &case.state, spec).unwrap();
        let mut oracle = FeatureStats::zeros(spec.d_feat);
        let mut feat = vec![0.0f32; spec.d_feat];
        for k in 0..case.w.len() {
            ctx.features_into(k, case.w.as_slice()[k], &mut feat);
            oracle.accumulate(&feat);
        }
        let cuts = [0, 100, 101, 700, case.w.len()];
        let parts: Vec<FeatureStats> = cuts
            .windows(2)
            .map(|c| {
                let s = ShardState::cut(&case.w, &case.state, c[0]..c[1]);
                let ctx = s.context(spec, &case.g.as_slice()[c[0]..c[1]]).unwrap();
                stats_pass(&ctx, &s.param, 3, &arena).unwrap()
            })
            .collect();
        let merged = normalization_across_shards(&parts).unwrap();
        assert_eq!(merged.count, oracle.count);
        for (a, b) in merged.sumsq.iter().zip(&oracle.sumsq) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn trace_csv_and_model() {
        let h0 = model(&EIGHT, 24);
        let g = worker_grads(&h0, 4, 25);
        let mut h = h0.clone();
        let out = run_step(Strategy::ReduceScatter, &mut h, &g).unwrap();
        let csv = out.trace.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        assert_eq!(lines.count(), 4);
        let p = 8 * 120u64;
        assert_eq!(out.trace.phase(Phase::GradReduce).unwrap().bytes, p * 4 * 3 / 4);
        let modeled = out.trace.modeled(&CostModel {
            bandwidth_bytes_per_s: 1e9,
            latency_s: 1e-5,
        });
        let gr = modeled.phase(Phase::GradReduce).unwrap();
        assert!((gr.time_ms - 1e3 * (1e-5 + gr.bytes as f64 / 1e9)).abs() < 1e-12);
        let mut tampered = out.trace.clone();
        tampered.records[0].bytes += 1;
        assert!(tampered.validate(&shapes(&h), h.spec().d_feat).is_err());
    }

    #[test]
    fn strategy_names() {
        for (s, want) in [("allreduce", Strategy::AllReduce), ("rs", Strategy::ReduceScatter), ("a2a", Strategy::FsdpA2a)] {
            assert_eq!(s.parse::<Strategy>().unwrap(), want);
            assert_eq!(want.as_str().parse::<Strategy>().unwrap(), want);
        }
        assert!("ring".parse::<Strategy>().is_err());
    }

    proptest! {
        #[test]
        fn shard_plans_are_even_and_exhaustive(
            lens in proptest::collection::vec(0usize..50, 1..10),
            workers in 1usize..7,
        ) {
            let plan = ShardPlan::new(Strategy::ReduceScatter, workers, &lens).unwrap();
            plan.check(Strategy::ReduceScatter, workers, &lens).unwrap();
            let per = plan.elements_per_worker(&lens);
            prop_assert_eq!(per.iter().sum::<usize>(), lens.iter().sum::<usize>());
            prop_assert!(per.iter().max().unwrap() - per.iter().min().unwrap() <= 1);

            let fsdp = ShardPlan::new(Strategy::FsdpA2a, workers, &lens).unwrap();
            fsdp.check(Strategy::FsdpA2a, workers, &lens).unwrap();
            let owned: usize = (0..workers).map(|w| fsdp.owned_by(w).len()).sum();
            prop_assert_eq!(owned, lens.len());
        }

        #[test]
        fn strategies_agree(seed in 0u64..1000, n in 1usize..5, rows in 1usize..9, cols in 1usize..9) {
            let h0 = model(&[(rows, cols), (cols, 3), (1, rows)], seed);
            let g = worker_grads(&h0, n, seed + 1);
            let mut results = Vec::new();
            for s in Strategy::ALL {
                let mut h = h0.clone();
                run_step(s, &mut h, &g).unwrap();
                results.push(h);
            }
            prop_assert!(worst(&results[1], &results[0]) <= 1e-6);
            prop_assert!(worst(&results[2], &results[0]) <= 1e-6);
        }
    }
}
