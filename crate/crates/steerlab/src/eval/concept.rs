//! Oracle-scored concept metrics: flip rate, confidence shift, detection
//! rates.

use rayon::prelude::*;
use steerlab_nn::Tensor;

use crate::error::{LabError, Result};
use crate::synth::SceneClass;

use super::oracle::OracleClassifier;

/// Fraction of images no longer classified as `source_class`.
pub fn flip_rate(oracle: &OracleClassifier, images: &[Tensor], source_class: usize) -> Result<f32> {
    Ok(1.0 - classified_fraction(oracle, images, source_class)?)
}

/// Fraction of images whose argmax class equals `class`.
pub fn classified_fraction(
    oracle: &OracleClassifier,
    images: &[Tensor],
    class: usize,
) -> Result<f32> {
    if images.is_empty() {
        return Err(LabError::Invalid("empty image set".into()));
    }
    let preds: Vec<Result<usize>> = images.par_iter().map(|img| oracle.predict(img)).collect();
    let mut hits = 0usize;
    for p in preds {
        if p? == class {
            hits += 1;
        }
    }
    Ok(hits as f32 / images.len() as f32)
}

/// Mean drop in source-class probability from unsteered to steered images.
/// The mean is signed: pairs whose probability rises subtract from it.
pub fn confidence_shift(
    oracle: &OracleClassifier,
    steered: &[Tensor],
    unsteered: &[Tensor],
    source_class: usize,
) -> Result<f32> {
    if steered.len() != unsteered.len() || steered.is_empty() {
        return Err(LabError::Invalid(format!(
            "confidence shift needs matched nonempty sets, got {}/{}",
            steered.len(),
            unsteered.len()
        )));
    }
    let shifts: Vec<Result<f32>> = steered
        .par_iter()
        .zip(unsteered.par_iter())
        .map(|(s, u)| {
            let ps = oracle.probs(s)?[source_class];
            let pu = oracle.probs(u)?[source_class];
            Ok(pu - ps)
        })
        .collect();
    let mut acc = 0.0f32;
    let n = shifts.len() as f32;
    for s in shifts {
        acc += s?;
    }
    Ok(acc / n)
}

/// Dye detection rate: fraction still classified as the dyed class.
/// Requires the four-class oracle (trained with a dye class).
pub fn ddr(oracle: &OracleClassifier, images: &[Tensor]) -> Result<f32> {
    if oracle.n_classes <= SceneClass::DyedLesion.index() {
        return Err(LabError::Invalid(format!(
            "oracle with {} classes has no dye class",
            oracle.n_classes
        )));
    }
    classified_fraction(oracle, images, SceneClass::DyedLesion.index())
}

/// Fraction classified as containing a lesion (lesion or dyed-lesion class).
pub fn lesion_presence_rate(oracle: &OracleClassifier, images: &[Tensor]) -> Result<f32> {
    if images.is_empty() {
        return Err(LabError::Invalid("empty image set".into()));
    }
    let preds: Vec<Result<usize>> = images.par_iter().map(|img| oracle.predict(img)).collect();
    let mut hits = 0usize;
    for p in preds {
        let class = p?;
        if class == SceneClass::Lesion.index() || class == SceneClass::DyedLesion.index() {
            hits += 1;
        }
    }
    Ok(hits as f32 / images.len() as f32)
}
