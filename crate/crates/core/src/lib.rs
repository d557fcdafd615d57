//! Learned-optimizer step engine.
//!
//! The crate computes learned-optimizer updates for dense `f32` parameter
//! tensors. Accumulators ([`state`]) feed a per-element feature vector
//! ([`features`]) that is normalized over the tensor and passed through a small
//! MLP ([`engine`]) predicting a direction and a magnitude. The engine runs the
//! step either by materializing every intermediate (naive) or in two fused
//! streaming passes. [`optim`] wraps the engine in a multi-tensor optimizer with
//! schedules, decoupled weight decay and checkpoints, and [`distsim`] simulates
//! data-parallel optimizer steps across in-process workers.

pub mod distsim;
pub mod engine;
pub mod error;
pub mod features;
pub mod optim;
pub mod state;
pub mod synth;
pub mod tensors;

pub use error::{Error, Result};
