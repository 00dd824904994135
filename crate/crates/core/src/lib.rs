//! Caption generation with continuous diffusion over analog bits.

pub mod bitcodec;
pub mod captioner;
pub mod cascade;
pub mod diffusion;
mod error;
pub mod gscst;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod retrieval;

pub use error::{Error, Result};
