//! Pathology-vector estimation and spatially selective steering.
//!
//! Offline: unsteered runs are captured per seed, cross-attention features
//! are averaged over seeds and spatial tokens for a contrastive prompt pair,
//! and the normalized mean difference per `(layer, step)` becomes the unit
//! direction bank. Online: a gated per-token subtraction removes (or, with
//! the negated direction, adds) the concept while leaving orthogonal
//! structure untouched. The bank is estimated once and reused; steering
//! never runs capture passes.

mod capture;
mod estimate;
mod pair;
mod sigma;
mod ssps;

pub use capture::{capture_activations, sample_rng, ActivationTrace, CaptureInterceptor};
pub use estimate::{estimate_vectors, BankManifest, PathologyVectorBank};
pub use pair::{generate_pair, CounterfactualPair, GenerationRecord};
pub use sigma::{export_sigma_maps, SigmaIndex, SigmaMapStack};
pub use ssps::{ssps_apply, SspsInterceptor, SteerConfig, SteerMode};

/// Fixed-order dot product.
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (&x, &y) in a.iter().zip(b.iter()) {
        acc += x * y;
    }
    acc
}

pub(crate) fn l2_norm(a: &[f32]) -> f32 {
    dot(a, a).sqrt()
}
