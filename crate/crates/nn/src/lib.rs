//! Deterministic tensor numerics for the steering laboratory: dense f32
//! tensors, a seeded splittable RNG, a fixed-op-set reverse-mode tape, and
//! the STEERTENSOR file format.
//!
//! Everything here is bit-reproducible: fixed summation orders, `libm`
//! transcendentals, and counter-based random streams.

pub mod error;
pub mod graph;
pub mod io;
pub mod ops;
pub mod rng;
pub mod tensor;

pub use error::{NnError, Result};
pub use graph::{Gradients, Graph, NodeId};
pub use rng::{randn, Rng};
pub use tensor::Tensor;
