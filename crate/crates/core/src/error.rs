use thiserror::Error;

use crate::tensors::FormatError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor size overflow: {rows} x {cols}")]
    SizeOverflow { rows: usize, cols: usize },

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("data length {len} does not match shape {rows} x {cols}")]
    LengthMismatch { rows: usize, cols: usize, len: usize },

    #[error("expected {expected} items, got {got}")]
    CountMismatch { expected: usize, got: usize },

    #[error("non-finite value at element {index}")]
    NonFinite { index: usize },

    #[error("non-finite gradient for tensor `{tensor}` at element {index}")]
    NonFiniteGradient { tensor: String, index: usize },

    #[error("empty tensor ({rows} x {cols}) is not allowed here")]
    EmptyTensor { rows: usize, cols: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("out of memory: requested {requested} bytes of scratch, {in_use} in use, cap {cap}")]
    OutOfMemory {
        requested: usize,
        in_use: usize,
        cap: usize,
    },

    #[error("update overflowed for element {index}: exp({exponent}) is not finite")]
    UpdateOverflow { index: usize, exponent: f32 },

    #[error("feature set mismatch: expected `{expected}`, found `{found}`")]
    FeatureSetMismatch { expected: String, found: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("distributed step failed: {0}")]
    Distributed(String),

    #[error(transparent)]
    Format(#[from] FormatError),
}
