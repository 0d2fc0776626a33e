//! Activation-steering laboratory over a toy diffusion transformer.

pub mod dit;
pub mod steer;
pub mod error;
pub mod eval;
pub mod img;
pub mod synth;

pub use error::{LabError, Result};
