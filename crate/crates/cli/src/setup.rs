//! Construction helpers shared by the commands.

use std::sync::Arc;

use anyhow::{Context, Result};
use lopt_core::engine::{Engine, EngineConfig, LoptWeights, ScratchArena, DEFAULT_HIDDEN};
use lopt_core::synth;
use lopt_core::tensors::{NamedTensorFile, ParamTensor};
use rand::Rng;

use crate::{EngineArgs, WeightsArgs};

pub fn engine(args: &EngineArgs) -> Result<Engine> {
    anyhow::ensure!(args.workers >= 1, "--workers must be at least 1");
    let arena = match args.scratch_cap_bytes {
        Some(cap) => ScratchArena::with_cap(cap),
        None => ScratchArena::unlimited(),
    };
    let config = EngineConfig {
        workers: args.workers,
        ..EngineConfig::default()
    };
    Ok(Engine::with_arena(config, Arc::new(arena)))
}

pub fn weights(args: &WeightsArgs, seed: u64) -> Result<LoptWeights> {
    match &args.weights {
        Some(path) => {
            let file = NamedTensorFile::load(path).with_context(|| format!("reading {}", path.display()))?;
            LoptWeights::from_file(&file).with_context(|| format!("loading weights from {}", path.display()))
        }
        None => Ok(LoptWeights::random(args.feature_set, &DEFAULT_HIDDEN, seed)?),
    }
}

/// Uniform `[-scale, scale)` tensors of the given shapes.
pub fn random_tensors(shapes: &[(usize, usize)], scale: f32, rng: &mut impl Rng) -> Vec<ParamTensor> {
    shapes
        .iter()
        .map(|&(r, c)| synth::uniform_tensor(r, c, scale, rng))
        .collect()
}

/// Named parameters `{prefix}{i}` for the given tensors.
pub fn named(tensors: Vec<ParamTensor>, prefix: &str) -> Vec<(String, ParamTensor)> {
    tensors
        .into_iter()
        .enumerate()
        .map(|(i, t)| (format!("{prefix}{i}"), t))
        .collect()
}
