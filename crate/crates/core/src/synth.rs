//! Seeded synthetic inputs for tests, benchmarks and the CLI.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::state::{BetaConfig, OptState};
use crate::tensors::ParamTensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in `[-scale, scale)`.
pub fn uniform_tensor(rows: usize, cols: usize, scale: f32, rng: &mut impl Rng) -> ParamTensor {
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-1.0f32..1.0) * scale)
        .collect();
    ParamTensor::from_vec(rows, cols, data).expect("finite uniform values")
}

/// Parameters, a gradient, and a state already advanced by that gradient.
#[derive(Debug, Clone)]
pub struct StepCase {
    pub w: ParamTensor,
    pub g: ParamTensor,
    pub state: OptState,
}

/// A `rows x cols` case whose state has seen a few random gradients before `g`.
pub fn random_case(rows: usize, cols: usize, seed: u64, betas: &BetaConfig) -> StepCase {
    let mut rng = rng(seed);
    let w = uniform_tensor(rows, cols, 1.0, &mut rng);
    let mut state = OptState::new(rows, cols).expect("valid shape");
    let history = rng.gen_range(1..4);
    for _ in 0..history {
        let scale = rng.gen_range(0.01f32..1.0);
        let g = uniform_tensor(rows, cols, scale, &mut rng);
        state.step(&g, betas).expect("finite gradient");
    }
    let g = uniform_tensor(rows, cols, rng.gen_range(0.01f32..1.0), &mut rng);
    state.step(&g, betas).expect("finite gradient");
    StepCase { w, g, state }
}
