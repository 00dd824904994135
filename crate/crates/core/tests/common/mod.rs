//! Fixtures shared by the integration tests and the acceptance run.
#![allow(dead_code)]

pub mod diffusion;
pub mod metrics;
pub mod policy;
pub mod stage;
