//! Learned-optimizer step execution.
//!
//! Two paths compute the same update:
//!
//! * **naive** materializes the full `mn x d_feat` feature matrix with one bulk
//!   pass per elementwise operation, reduces each column, normalizes, runs the
//!   MLP over row blocks and applies the update with further bulk passes;
//! * **fused** makes two streaming passes. Pass one recomputes features per
//!   element and accumulates per-worker squared sums, merged with a fixed
//!   binary tree. Pass two recomputes features, normalizes them with the
//!   broadcast statistics, runs the MLP in registers and writes the update.
//!
//! Both paths expect the accumulators to be advanced already
//! ([`crate::state::OptState::step`]). They agree up to floating-point
//! reassociation of the statistics reduction.

mod fused;
mod mlp;
mod naive;
mod scratch;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use fused::{apply_pass, stats_pass, tree_reduce};
pub use mlp::{
    apply_update, mlp_forward, update_delta, DenseLayer, LoptWeights, UpdateSign, DEFAULT_ALPHA,
    DEFAULT_BETA_OUT, DEFAULT_HIDDEN,
};
pub use scratch::{ScratchArena, ScratchBuf, ScratchGuard};

use crate::error::{Error, Result};
use crate::features::{FeatureSetId, FeatureSetSpec};
use crate::state::OptState;
use crate::tensors::ParamTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecPath {
    Naive,
    Fused,
}

impl ExecPath {
    pub fn as_str(self) -> &'static str {
        match self {
            ExecPath::Naive => "naive",
            ExecPath::Fused => "fused",
        }
    }
}

impl fmt::Display for ExecPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExecPath {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(ExecPath::Naive),
            "fused" => Ok(ExecPath::Fused),
            other => Err(Error::InvalidConfig(format!("unknown path `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Worker threads for the fused passes. Results are bit-reproducible for a
    /// fixed worker count.
    pub workers: usize,
    /// Rows per MLP block in the naive path.
    pub naive_block_rows: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            workers: 1,
            naive_block_rows: 4096,
        }
    }
}

/// Per-tensor outcome of one engine step.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateReport {
    pub tensor: String,
    pub path: ExecPath,
    pub elements: usize,
    pub max_abs_delta: f32,
    pub stats_time: Duration,
    pub apply_time: Duration,
    /// Bulk passes over the tensor performed by the engine (accumulator
    /// updates excluded).
    pub kernel_equivalents: usize,
    /// High-water mark of tracked scratch bytes during this step.
    pub scratch_peak_bytes: usize,
    /// Loss passed to the optimizer step, recorded only.
    pub loss: Option<f32>,
}

impl UpdateReport {
    pub const CSV_HEADER: &'static str =
        "tensor,path,elements,max_abs_delta,stats_ms,apply_ms,kernel_equivalents,scratch_peak_bytes,loss";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6},{},{},{}",
            self.tensor,
            self.path,
            self.elements,
            self.max_abs_delta,
            self.stats_time.as_secs_f64() * 1e3,
            self.apply_time.as_secs_f64() * 1e3,
            self.kernel_equivalents,
            self.scratch_peak_bytes,
            self.loss.map(|l| l.to_string()).unwrap_or_default(),
        )
    }
}

/// Bulk passes over parameter-sized data, by phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct KernelCount {
    pub accumulator_updates: usize,
    pub feature_passes: usize,
    pub reductions: usize,
    pub normalization: usize,
    pub mlp: usize,
    pub apply: usize,
}

impl KernelCount {
    pub fn total(&self) -> usize {
        self.accumulator_updates + self.engine_passes()
    }

    /// Passes performed by the engine step itself.
    pub fn engine_passes(&self) -> usize {
        self.feature_passes + self.reductions + self.normalization + self.mlp + self.apply
    }
}

pub(crate) const ACCUMULATOR_UPDATES: usize = 10;

/// Number of bulk passes each path makes over one tensor for an MLP with
/// `mlp_layers` dense layers.
///
/// The naive count follows the eager operation sequence in `naive.rs`: one pass
/// per elementwise op that builds a feature column, one reduction and one
/// normalization pass per column, a matmul per layer plus a ReLU between
/// layers, and six passes for the update rule. The fused path makes two passes.
pub fn count_kernel_equivalents(path: ExecPath, spec: &FeatureSetSpec, mlp_layers: usize) -> KernelCount {
    match path {
        ExecPath::Fused => KernelCount {
            accumulator_updates: ACCUMULATOR_UPDATES,
            feature_passes: 1,
            apply: 1,
            ..KernelCount::default()
        },
        ExecPath::Naive => {
            // accumulators copied/broadcast (10), sqrt(V+eps) (2), M/sqrt (3),
            // 1/sqrt (1), factor reciprocals broadcast (6), Adafactor features (3 x 6)
            let shared = 10 + 2 + 3 + 1 + 6 + 18;
            let tail = match spec.id {
                FeatureSetId::SmallFcLopt => spec.time_xs.len() + 2,
                FeatureSetId::VeloMlp => 3,
            };
            KernelCount {
                accumulator_updates: ACCUMULATOR_UPDATES,
                feature_passes: shared + tail,
                reductions: spec.d_feat,
                normalization: spec.d_feat,
                mlp: 2 * mlp_layers - 1,
                apply: naive::APPLY_PASSES,
            }
        }
    }
}

/// Executes engine steps with a fixed configuration and a shared scratch arena.
#[derive(Debug, Clone)]
pub struct Engine {
    config: EngineConfig,
    arena: Arc<ScratchArena>,
}

impl Default for Engine {
    fn default() -> Self {
        Self::new(EngineConfig::default())
    }
}

impl Engine {
    pub fn new(config: EngineConfig) -> Self {
        Self::with_arena(config, Arc::new(ScratchArena::unlimited()))
    }

    pub fn with_arena(config: EngineConfig, arena: Arc<ScratchArena>) -> Self {
        Self { config, arena }
    }

    /// Same configuration with a fresh scratch arena of the same cap.
    pub fn fork(&self) -> Self {
        let arena = match self.arena.cap() {
            Some(cap) => ScratchArena::with_cap(cap),
            None => ScratchArena::unlimited(),
        };
        Self::with_arena(self.config, Arc::new(arena))
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn arena(&self) -> &Arc<ScratchArena> {
        &self.arena
    }

    fn check(&self, w: &ParamTensor, g: &ParamTensor, state: &OptState, weights: &LoptWeights, spec: &FeatureSetSpec) -> Result<()> {
        if self.config.workers == 0 || self.config.naive_block_rows == 0 {
            return Err(Error::InvalidConfig("workers and block rows must be positive".into()));
        }
        spec.validate()?;
        if weights.feature_set() != spec.id {
            return Err(Error::FeatureSetMismatch {
                expected: spec.id.to_string(),
                found: weights.feature_set().to_string(),
            });
        }
        w.ensure_shape(state.shape())?;
        g.ensure_shape(state.shape())?;
        if w.is_empty() {
            return Err(Error::EmptyTensor {
                rows: w.rows(),
                cols: w.cols(),
            });
        }
        Ok(())
    }

    /// Naive step, in place. `lr` multiplies the update.
    #[allow(clippy::too_many_arguments)]
    pub fn step_naive(
        &self,
        name: &str,
        w: &mut ParamTensor,
        g: &ParamTensor,
        state: &OptState,
        weights: &LoptWeights,
        spec: &FeatureSetSpec,
        lr: f32,
    ) -> Result<UpdateReport> {
        self.check(w, g, state, weights, spec)?;
        naive::step(self, name, w, g, state, weights, spec, lr)
    }

    /// Fused two-pass step, in place. `lr` multiplies the update.
    ///
    /// If the update overflows, the error is returned and `w` may be partially
    /// updated.
    #[allow(clippy::too_many_arguments)]
    pub fn step_fused(
        &self,
        name: &str,
        w: &mut ParamTensor,
        g: &ParamTensor,
        state: &OptState,
        weights: &LoptWeights,
        spec: &FeatureSetSpec,
        lr: f32,
    ) -> Result<UpdateReport> {
        self.check(w, g, state, weights, spec)?;
        fused::step(self, name, w, g, state, weights, spec, lr)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        path: ExecPath,
        name: &str,
        w: &mut ParamTensor,
        g: &ParamTensor,
        state: &OptState,
        weights: &LoptWeights,
        spec: &FeatureSetSpec,
        lr: f32,
    ) -> Result<UpdateReport> {
        match path {
            ExecPath::Naive => self.step_naive(name, w, g, state, weights, spec, lr),
            ExecPath::Fused => self.step_fused(name, w, g, state, weights, spec, lr),
        }
    }
}

/// Functional naive step: returns the updated parameters.
pub fn step_naive(
    engine: &Engine,
    w: &ParamTensor,
    g: &ParamTensor,
    state: &OptState,
    weights: &LoptWeights,
    spec: &FeatureSetSpec,
) -> Result<(ParamTensor, UpdateReport)> {
    let mut out = w.clone();
    let report = engine.step_naive("", &mut out, g, state, weights, spec, 1.0)?;
    Ok((out, report))
}

/// Functional fused step: returns the updated parameters.
pub fn step_fused(
    engine: &Engine,
    w: &ParamTensor,
    g: &ParamTensor,
    state: &OptState,
    weights: &LoptWeights,
    spec: &FeatureSetSpec,
) -> Result<(ParamTensor, UpdateReport)> {
    let mut out = w.clone();
    let report = engine.step_fused("", &mut out, g, state, weights, spec, 1.0)?;
    Ok((out, report))
}

/// `|a - b| <= tol * (1 + |b|)` elementwise; returns the worst offending ratio.
pub fn max_relative_deviation(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| ((x as f64 - y as f64).abs()) / (1.0 + (y as f64).abs()))
        .fold(0.0, f64::max)
}
