//! A small reverse-mode differentiation engine.
//!
//! Values live in row-major [`Tensor`]s. Operations are recorded on a
//! [`Tape`] as they execute; [`Tape::backward`] replays the tape in reverse
//! and returns gradients for every node that requires one. Model parameters
//! are kept in a [`ParamStore`] and bound lazily into a [`Graph`], so a tape
//! only references the parameters a forward pass actually touches.
//!
//! Everything is generic over [`Real`] (`f32` or `f64`). Gradient checks use
//! `f64`; training normally runs in `f32`.

mod checkpoint;
mod error;
pub mod gradcheck;
mod kernels;
mod optim;
mod params;
mod real;
mod tape;
mod tensor;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use error::{Error, Result};
pub use optim::{adam_step, AdamConfig, AdamState, LrSchedule};
pub use params::{GradBuffer, Graph, ParamGrads, ParamId, ParamStore};
pub use real::{DType, Real};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
