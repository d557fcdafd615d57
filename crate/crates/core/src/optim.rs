//! Optimizer facade: multi-tensor learned-optimizer steps with a learning-rate
//! schedule and decoupled weight decay, Adam and Adafactor baselines, and
//! checkpoint/resume.
//!
//! Each [`OptimizerHandle::step`] runs, for every tensor in order: the
//! accumulator update, the learned update scaled by the scheduled learning
//! rate, then weight decay `theta -= lr * lambda * theta`. The learning rate is
//! taken at the step count before the step.
//!
//! The `loss` passed to a step is copied into the reports only. It never
//! changes the update.
//!
//! Adafactor here keeps a factored second moment with no momentum and no
//! relative step size or update clipping:
//!
//! ```text
//! r_i = b2 r_i + (1 - b2) mean_j(g_ij^2 + eps)
//! c_j = b2 c_j + (1 - b2) mean_i(g_ij^2 + eps)
//! v_ij = r_i c_j / mean(r) / (1 - b2^t)
//! theta_ij -= lr g_ij / sqrt(v_ij)
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::engine::{Engine, EngineConfig, ExecPath, LoptWeights, UpdateReport};
use crate::error::{Error, Result};
use crate::features::{FeatureSetId, FeatureSetSpec};
use crate::state::OptState;
use crate::tensors::{NamedTensorFile, ParamTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub max_lr: f32,
    pub min_lr: f32,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self::constant(1.0)
    }
}

impl ScheduleConfig {
    pub fn constant(lr: f32) -> Self {
        Self {
            kind: ScheduleKind::Constant,
            max_lr: lr,
            min_lr: lr,
            warmup_steps: 0,
            total_steps: 0,
        }
    }

    pub fn cosine(max_lr: f32, min_lr: f32, warmup_steps: u64, total_steps: u64) -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            max_lr,
            min_lr,
            warmup_steps,
            total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min_lr.is_finite() && self.max_lr.is_finite()) || !(0.0 <= self.min_lr && self.min_lr <= self.max_lr) {
            return Err(Error::InvalidConfig(format!(
                "schedule needs 0 <= min_lr <= max_lr, got {} and {}",
                self.min_lr, self.max_lr
            )));
        }
        if self.kind == ScheduleKind::Cosine && self.warmup_steps > self.total_steps {
            return Err(Error::InvalidConfig(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }
}

/// Learning rate at `step`: linear warmup from 0 to `max_lr` over
/// `warmup_steps`, then constant or cosine-annealed to `min_lr` at
/// `total_steps`. Steps past the end stay at `min_lr`.
pub fn schedule_lr(cfg: &ScheduleConfig, step: u64) -> f32 {
    if step < cfg.warmup_steps {
        return (cfg.max_lr as f64 * step as f64 / cfg.warmup_steps as f64) as f32;
    }
    match cfg.kind {
        ScheduleKind::Constant => cfg.max_lr,
        ScheduleKind::Cosine => {
            if step >= cfg.total_steps {
                return cfg.min_lr;
            }
            let span = (cfg.total_steps - cfg.warmup_steps) as f64;
            let progress = (step - cfg.warmup_steps) as f64 / span;
            let (max, min) = (cfg.max_lr as f64, cfg.min_lr as f64);
            let lr = min + 0.5 * (max - min) * (1.0 + (std::f64::consts::PI * progress).cos());
            (lr as f32).clamp(cfg.min_lr, cfg.max_lr)
        }
    }
}

/// `theta - lr * lambda * theta`, elementwise, in place, computed as
/// `theta * (1 - lr * lambda)`.
pub fn decay_in_place(theta: &mut [f32], lr: f32, lambda: f32) {
    if lambda == 0.0 {
        return;
    }
    let keep = 1.0 - lr * lambda;
    for x in theta {
        *x *= keep;
    }
}

/// Decoupled weight decay `theta - lr * lambda * theta`.
pub fn apply_weight_decay(theta: &ParamTensor, lr: f32, lambda: f32) -> Result<ParamTensor> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidConfig(format!("weight decay must be >= 0, got {lambda}")));
    }
    let mut out = theta.clone();
    decay_in_place(out.as_mut_slice(), lr, lambda);
    Ok(out)
}

/// Learned-optimizer weights for a handle: one set for every tensor, or one per tensor name.
#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerWeights {
    Shared(LoptWeights),
    PerTensor(BTreeMap<String, LoptWeights>),
}

impl OptimizerWeights {
    pub(crate) fn get(&self, name: &str) -> Result<&LoptWeights> {
        match self {
            Self::Shared(w) => Ok(w),
            Self::PerTensor(map) => map
                .get(name)
                .ok_or_else(|| Error::InvalidConfig(format!("no optimizer weights for tensor `{name}`"))),
        }
    }

    fn all(&self) -> Vec<&LoptWeights> {
        match self {
            Self::Shared(w) => vec![w],
            Self::PerTensor(map) => map.values().collect(),
        }
    }
}

/// A learned optimizer over an ordered list of named tensors.
#[derive(Debug, Clone)]
pub struct OptimizerHandle {
    pub(crate) params: Vec<(String, ParamTensor)>,
    pub(crate) states: Vec<OptState>,
    pub(crate) weights: OptimizerWeights,
    pub(crate) spec: FeatureSetSpec,
    pub(crate) schedule: ScheduleConfig,
    pub(crate) weight_decay: f32,
    pub(crate) path: ExecPath,
    pub(crate) step: u64,
    pub(crate) engine: Engine,
}

impl OptimizerHandle {
    /// Fresh accumulators for every tensor; constant learning rate 1, no decay, fused path.
    pub fn new(params: Vec<(String, ParamTensor)>, weights: OptimizerWeights) -> Result<Self> {
        let states = params
            .iter()
            .map(|(_, p)| OptState::for_tensor(p))
            .collect::<Result<_>>()?;
        Self::from_parts(params, states, weights, 0)
    }

    fn from_parts(
        params: Vec<(String, ParamTensor)>,
        states: Vec<OptState>,
        weights: OptimizerWeights,
        step: u64,
    ) -> Result<Self> {
        let all = weights.all();
        let first = all
            .first()
            .ok_or_else(|| Error::InvalidConfig("no optimizer weights".into()))?;
        let id = first.feature_set();
        for w in &all {
            if w.feature_set() != id {
                return Err(Error::FeatureSetMismatch {
                    expected: id.to_string(),
                    found: w.feature_set().to_string(),
                });
            }
        }
        let mut seen = std::collections::HashSet::new();
        for ((name, p), s) in params.iter().zip(&states) {
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate tensor name `{name}`")));
            }
            weights.get(name)?;
            p.ensure_shape(s.shape())?;
            if s.step != step {
                return Err(Error::InvalidConfig(format!(
                    "state of `{name}` is at step {}, handle at {step}",
                    s.step
                )));
            }
        }
        if params.len() != states.len() {
            return Err(Error::CountMismatch {
                expected: params.len(),
                got: states.len(),
            });
        }
        Ok(Self {
            params,
            states,
            weights,
            spec: FeatureSetSpec::for_id(id),
            schedule: ScheduleConfig::default(),
            weight_decay: 0.0,
            path: ExecPath::Fused,
            step,
            engine: Engine::default(),
        })
    }

    pub fn with_schedule(mut self, schedule: ScheduleConfig) -> Result<Self> {
        schedule.validate()?;
        self.schedule = schedule;
        Ok(self)
    }

    pub fn with_weight_decay(mut self, lambda: f32) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("weight decay must be >= 0, got {lambda}")));
        }
        self.weight_decay = lambda;
        Ok(self)
    }

    pub fn with_path(mut self, path: ExecPath) -> Self {
        self.path = path;
        self
    }

    pub fn with_engine(mut self, engine: Engine) -> Self {
        self.engine = engine;
        self
    }

    pub fn params(&self) -> &[(String, ParamTensor)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&ParamTensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn states(&self) -> &[OptState] {
        &self.states
    }

    pub fn weights(&self) -> &OptimizerWeights {
        &self.weights
    }

    pub fn weights_for(&self, name: &str) -> Result<&LoptWeights> {
        self.weights.get(name)
    }

    pub fn spec(&self) -> &FeatureSetSpec {
        &self.spec
    }

    pub fn schedule(&self) -> &ScheduleConfig {
        &self.schedule
    }

    pub fn weight_decay(&self) -> f32 {
        self.weight_decay
    }

    pub fn path(&self) -> ExecPath {
        self.path
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    /// Global step count `T`.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Learning rate the next step will use.
    pub fn current_lr(&self) -> f32 {
        schedule_lr(&self.schedule, self.step)
    }

    /// Total bytes of accumulator state.
    pub fn state_bytes(&self) -> usize {
        self.states.iter().map(OptState::size_bytes).sum()
    }

    /// Checks gradient count, shapes and finiteness without modifying anything.
    pub(crate) fn validate_grads(&self, grads: &[ParamTensor]) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::CountMismatch {
                expected: self.params.len(),
                got: grads.len(),
            });
        }
        for ((name, p), g) in self.params.iter().zip(grads) {
            g.ensure_shape(p.shape())?;
            if let Some(index) = g.as_slice().iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    tensor: name.clone(),
                    index,
                });
            }
        }
        Ok(())
    }

    /// One optimizer step over every tensor. All gradients are validated before
    /// anything changes; an update overflow part way through leaves earlier
    /// tensors updated.
    pub fn step(&mut self, grads: &[ParamTensor], loss: Option<f32>) -> Result<Vec<UpdateReport>> {
        self.validate_grads(grads)?;
        let lr = self.current_lr();
        let mut reports = Vec::with_capacity(grads.len());
        for (((name, w), state), g) in self.params.iter_mut().zip(&mut self.states).zip(grads) {
            let weights = self.weights.get(name)?;
            let mut report = step_tensor(&self.engine, self.path, &self.spec, name, w, g, state, weights, lr, self.weight_decay)?;
            report.loss = loss;
            reports.push(report);
        }
        self.step += 1;
        Ok(reports)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        checkpoint_save(self)?.save(path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        checkpoint_load(&NamedTensorFile::load(path)?)
    }
}

/// Accumulator update, engine step and weight decay for one tensor.
#[allow(clippy::too_many_arguments)]
pub(crate) fn step_tensor(
    engine: &Engine,
    path: ExecPath,
    spec: &FeatureSetSpec,
    name: &str,
    w: &mut ParamTensor,
    g: &ParamTensor,
    state: &mut OptState,
    weights: &LoptWeights,
    lr: f32,
    weight_decay: f32,
) -> Result<UpdateReport> {
    state.step(g, &weights.betas)?;
    let report = engine.step(path, name, w, g, state, weights, spec, lr)?;
    decay_in_place(w.as_mut_slice(), lr, weight_decay);
    Ok(report)
}

/// Functional form of [`OptimizerHandle::step`].
pub fn opt_step(h: &mut OptimizerHandle, grads: &[ParamTensor], loss: Option<f32>) -> Result<Vec<UpdateReport>> {
    h.step(grads, loss)
}

fn meta_err(key: &str) -> Error {
    Error::InvalidConfig(format!("checkpoint metadata `{key}` missing or malformed"))
}

/// Serializes parameters, accumulators, optimizer weights and configuration.
pub fn checkpoint_save(h: &OptimizerHandle) -> Result<NamedTensorFile> {
    let mut file = NamedTensorFile::new();
    file.set_meta("kind", "checkpoint");
    file.set_meta("step", h.step.to_string());
    file.set_meta("feature_set", h.spec.to_metadata());
    let names: Vec<&str> = h.params.iter().map(|(n, _)| n.as_str()).collect();
    file.set_meta("params", serde_json::to_string(&names).expect("serializes"));
    file.set_meta("schedule", serde_json::to_string(&h.schedule).expect("serializes"));
    file.set_meta("weight_decay", h.weight_decay.to_string());
    file.set_meta("path", h.path.as_str());
    file.set_meta("workers", h.engine.config().workers.to_string());
    file.set_meta("naive_block_rows", h.engine.config().naive_block_rows.to_string());
    for ((name, p), state) in h.params.iter().zip(&h.states) {
        file.insert(format!("param/{name}"), p.to_entry())?;
        state.write_to(name, &mut file)?;
    }
    match &h.weights {
        OptimizerWeights::Shared(w) => {
            file.set_meta("weights_mode", "shared");
            w.write_to("weights", &mut file);
        }
        OptimizerWeights::PerTensor(map) => {
            file.set_meta("weights_mode", "per_tensor");
            for (name, w) in map {
                w.write_to(&format!("weights/{name}"), &mut file);
            }
        }
    }
    Ok(file)
}

/// Restores a handle saved by [`checkpoint_save`]. The `feature_set` metadata
/// must agree with the stored optimizer weights.
pub fn checkpoint_load(file: &NamedTensorFile) -> Result<OptimizerHandle> {
    if file.meta("kind") != Some("checkpoint") {
        return Err(Error::InvalidConfig(format!(
            "expected a checkpoint, found kind `{}`",
            file.meta("kind").unwrap_or("none")
        )));
    }
    let spec = FeatureSetSpec::from_metadata(file.meta("feature_set").ok_or_else(|| meta_err("feature_set"))?)?;
    let step: u64 = file
        .meta("step")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| meta_err("step"))?;
    let names: Vec<String> = file
        .meta("params")
        .and_then(|s| serde_json::from_str(s).ok())
        .ok_or_else(|| meta_err("params"))?;
    let weights = match file.meta("weights_mode") {
        Some("shared") => OptimizerWeights::Shared(LoptWeights::read_from("weights", file)?),
        Some("per_tensor") => OptimizerWeights::PerTensor(
            names
                .iter()
                .map(|n| Ok((n.clone(), LoptWeights::read_from(&format!("weights/{n}"), file)?)))
                .collect::<Result<_>>()?,
        ),
        _ => return Err(meta_err("weights_mode")),
    };
    for w in weights.all() {
        if w.feature_set() != spec.id {
            return Err(Error::FeatureSetMismatch {
                expected: spec.id.to_string(),
                found: w.feature_set().to_string(),
            });
        }
    }
    let mut params = Vec::with_capacity(names.len());
    let mut states = Vec::with_capacity(names.len());
    for name in &names {
        let p = ParamTensor::from_entry(file.require(&format!("param/{name}"))?)?;
        states.push(OptState::read_from(name, p.rows(), p.cols(), file)?);
        params.push((name.clone(), p));
    }
    let schedule: ScheduleConfig = file
        .meta("schedule")
        .and_then(|s| serde_json::from_str(s).ok())
        .ok_or_else(|| meta_err("schedule"))?;
    let weight_decay: f32 = file
        .meta("weight_decay")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| meta_err("weight_decay"))?;
    let path: ExecPath = file
        .meta("path")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| meta_err("path"))?;
    let mut config = EngineConfig::default();
    if let Some(w) = file.meta("workers").and_then(|s| s.parse().ok()) {
        config.workers = w;
    }
    if let Some(b) = file.meta("naive_block_rows").and_then(|s| s.parse().ok()) {
        config.naive_block_rows = b;
    }
    Ok(OptimizerHandle::from_parts(params, states, weights, step)?
        .with_schedule(schedule)?
        .with_weight_decay(weight_decay)?
        .with_path(path)
        .with_engine(Engine::new(config)))
}

/// [`checkpoint_load`] that also requires the checkpoint to use `expected`.
pub fn checkpoint_load_expecting(file: &NamedTensorFile, expected: FeatureSetId) -> Result<OptimizerHandle> {
    let h = checkpoint_load(file)?;
    if h.spec.id != expected {
        return Err(Error::FeatureSetMismatch {
            expected: expected.to_string(),
            found: h.spec.id.to_string(),
        });
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam on slices, in place. `t` is the 1-based step.
pub fn adam_update(theta: &mut [f32], g: &[f32], m: &mut [f32], v: &mut [f32], cfg: &AdamConfig, t: u64) -> Result<()> {
    if t == 0 {
        return Err(Error::InvalidConfig("adam step count starts at 1".into()));
    }
    for len in [g.len(), m.len(), v.len()] {
        if len != theta.len() {
            return Err(Error::CountMismatch {
                expected: theta.len(),
                got: len,
            });
        }
    }
    let exp = i32::try_from(t).unwrap_or(i32::MAX);
    let c1 = 1.0 - cfg.beta1.powi(exp);
    let c2 = 1.0 - cfg.beta2.powi(exp);
    for (((p, &gi), mi), vi) in theta.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
        *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
        *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
        let m_hat = *mi / c1;
        let v_hat = *vi / c2;
        *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Functional Adam step returning `(theta', m', v')`.
pub fn adam_step(
    theta: &ParamTensor,
    g: &ParamTensor,
    m: &ParamTensor,
    v: &ParamTensor,
    cfg: &AdamConfig,
    t: u64,
) -> Result<(ParamTensor, ParamTensor, ParamTensor)> {
    for x in [g, m, v] {
        x.ensure_shape(theta.shape())?;
    }
    let (mut theta, mut m, mut v) = (theta.clone(), m.clone(), v.clone());
    adam_update(theta.as_mut_slice(), g.as_slice(), m.as_mut_slice(), v.as_mut_slice(), cfg, t)?;
    Ok((theta, m, v))
}

/// Adam over a list of tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

impl Adam {
    pub fn new(params: &[ParamTensor], config: AdamConfig) -> Self {
        Self {
            config,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [ParamTensor], grads: &[ParamTensor]) -> Result<()> {
        check_lists(params, grads, self.m.len())?;
        self.t += 1;
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            adam_update(p.as_mut_slice(), g.as_slice(), m, v, &self.config, self.t)?;
        }
        Ok(())
    }

    /// Bytes of optimizer state.
    pub fn state_bytes(&self) -> usize {
        4 * self.m.iter().chain(&self.v).map(Vec::len).sum::<usize>()
    }
}

fn check_lists(params: &[ParamTensor], grads: &[ParamTensor], expected: usize) -> Result<()> {
    for len in [params.len(), grads.len()] {
        if len != expected {
            return Err(Error::CountMismatch { expected, got: len });
        }
    }
    for (p, g) in params.iter().zip(grads) {
        g.ensure_shape(p.shape())?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdafactorConfig {
    pub lr: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdafactorConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta2: 0.999,
            eps: 1e-30,
        }
    }
}

/// Factored second-moment step on an `rows x cols` tensor, in place.
/// `t` is the 1-based step.
pub fn adafactor_update(
    theta: &mut [f32],
    g: &[f32],
    cols: usize,
    row: &mut [f32],
    col: &mut [f32],
    cfg: &AdafactorConfig,
    t: u64,
) -> Result<()> {
    if t == 0 {
        return Err(Error::InvalidConfig("adafactor step count starts at 1".into()));
    }
    let rows = row.len();
    if g.len() != theta.len() || theta.len() != rows * cols || col.len() != cols {
        return Err(Error::CountMismatch {
            expected: rows * cols,
            got: theta.len(),
        });
    }
    let eps = cfg.eps as f64;
    let mut row_sum = vec![0.0f64; rows];
    let mut col_sum = vec![0.0f64; cols];
    for (i, grow) in g.chunks_exact(cols).enumerate() {
        for (j, &x) in grow.iter().enumerate() {
            let sq = x as f64 * x as f64 + eps;
            row_sum[i] += sq;
            col_sum[j] += sq;
        }
    }
    let b2 = cfg.beta2;
    for (r, s) in row.iter_mut().zip(&row_sum) {
        *r = b2 * *r + (1.0 - b2) * (s / cols as f64) as f32;
    }
    for (c, s) in col.iter_mut().zip(&col_sum) {
        *c = b2 * *c + (1.0 - b2) * (s / rows as f64) as f32;
    }
    let mean_r = row.iter().map(|&x| x as f64).sum::<f64>() / rows as f64;
    let correction = 1.0 - (b2 as f64).powi(i32::try_from(t).unwrap_or(i32::MAX));
    for ((prow, grow), &r) in theta.chunks_exact_mut(cols).zip(g.chunks_exact(cols)).zip(row.iter()) {
        for ((p, &gi), &c) in prow.iter_mut().zip(grow).zip(col.iter()) {
            let v = r as f64 * c as f64 / mean_r / correction;
            *p -= (cfg.lr as f64 * gi as f64 / v.sqrt()) as f32;
        }
    }
    Ok(())
}

/// Functional Adafactor step returning `(theta', row', col')`.
pub fn adafactor_step(
    theta: &ParamTensor,
    g: &ParamTensor,
    row: &[f32],
    col: &[f32],
    cfg: &AdafactorConfig,
    t: u64,
) -> Result<(ParamTensor, Vec<f32>, Vec<f32>)> {
    g.ensure_shape(theta.shape())?;
    let (mut theta, mut row, mut col) = (theta.clone(), row.to_vec(), col.to_vec());
    let cols = theta.cols();
    adafactor_update(theta.as_mut_slice(), g.as_slice(), cols, &mut row, &mut col, cfg, t)?;
    Ok((theta, row, col))
}

/// Adafactor over a list of tensors.
#[derive(Debug, Clone)]
pub struct Adafactor {
    pub config: AdafactorConfig,
    row: Vec<Vec<f32>>,
    col: Vec<Vec<f32>>,
    t: u64,
}

impl Adafactor {
    pub fn new(params: &[ParamTensor], config: AdafactorConfig) -> Self {
        Self {
            config,
            row: params.iter().map(|p| vec![0.0; p.rows()]).collect(),
            col: params.iter().map(|p| vec![0.0; p.cols()]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [ParamTensor], grads: &[ParamTensor]) -> Result<()> {
        check_lists(params, grads, self.row.len())?;
        self.t += 1;
        for (((p, g), r), c) in params.iter_mut().zip(grads).zip(&mut self.row).zip(&mut self.col) {
            let cols = p.cols();
            adafactor_update(p.as_mut_slice(), g.as_slice(), cols, r, c, &self.config, self.t)?;
        }
        Ok(())
    }

    pub fn state_bytes(&self) -> usize {
        4 * self.row.iter().chain(&self.col).map(Vec::len).sum::<usize>()
    }
}
