//! Conventions tying subcommands together: where artifacts live inside a
//! run directory, and shared load/generate helpers.

use std::path::PathBuf;

use rayon::prelude::*;
use steerlab_nn::Tensor;

use crate::dit::{CheckpointManifest, DiffusionSchedule, ModelParams};
use crate::error::{LabError, Result};
use crate::eval::OracleClassifier;
use crate::steer::{generate_pair, CounterfactualPair, PathologyVectorBank, SteerConfig};
use crate::synth::{contrastive_pair, render_scene, Scene, SceneRecord, Split};

use super::config::RunConfig;

pub fn checkpoint_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("checkpoint")
}

pub fn oracle_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("oracle")
}

pub fn bank_dir(cfg: &RunConfig, concept: &str, z: Option<usize>) -> PathBuf {
    match z {
        None => cfg.out_dir.join(format!("bank_{concept}")),
        Some(z) => cfg.out_dir.join(format!("bank_{concept}_z{z}")),
    }
}

pub fn reports_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("reports")
}

/// Load the run's checkpoint and refuse untrained parameters.
pub fn load_trained(cfg: &RunConfig) -> Result<(ModelParams, CheckpointManifest)> {
    let dir = checkpoint_dir(cfg);
    let (params, manifest) = ModelParams::load(&dir)?;
    if !params.trained {
        return Err(LabError::NotTrained(dir));
    }
    Ok((params, manifest))
}

pub fn load_oracle(cfg: &RunConfig, floor: f32) -> Result<OracleClassifier> {
    let oracle = OracleClassifier::load(&oracle_dir(cfg))?;
    oracle.require_floor(floor)?;
    Ok(oracle)
}

pub fn load_bank(cfg: &RunConfig, concept: &str) -> Result<PathologyVectorBank> {
    PathologyVectorBank::load(&bank_dir(cfg, concept, None))
}

/// Render every record of one split, in manifest order, in parallel.
pub fn render_split(records: &[SceneRecord], split: Split, image_size: usize) -> Result<Vec<Scene>> {
    records
        .par_iter()
        .filter(|r| r.split == split)
        .map(|r| render_scene(&r.spec(image_size)))
        .collect()
}

/// Generate `n` counterfactual pairs for a concept, seeds `base..base+n`,
/// in parallel with deterministic ordering. The positive prompt's context
/// token varies with the seed.
pub fn gen_pairs(
    params: &ModelParams,
    schedule: &DiffusionSchedule,
    bank: &PathologyVectorBank,
    steer: &SteerConfig,
    concept: &str,
    n: usize,
    base_seed: u64,
) -> Result<Vec<CounterfactualPair>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let seed = base_seed + i as u64;
            let (pos, _) = contrastive_pair(concept, (seed % 3) as usize)?;
            generate_pair(params, &pos, bank, steer, schedule, seed)
        })
        .collect()
}

/// Unsteered generation of the *negative* prompt from the same seeds — the
/// re-prompting baseline image for each pair.
pub fn gen_reprompts(
    params: &ModelParams,
    schedule: &DiffusionSchedule,
    concept: &str,
    n: usize,
    base_seed: u64,
) -> Result<Vec<Tensor>> {
    use crate::dit::ddim_sample_from_noise;
    use crate::steer::sample_rng;
    use crate::synth::encode_prompt;
    use steerlab_nn::randn;

    (0..n)
        .into_par_iter()
        .map(|i| {
            let seed = base_seed + i as u64;
            let (_, neg) = contrastive_pair(concept, (seed % 3) as usize)?;
            let enc = encode_prompt(&neg, params.get("prompt_embed")?)?;
            let mut rng = sample_rng(seed);
            let size = params.config.image_size;
            let x_init = randn(&mut rng, &[3, size, size])?;
            Ok(ddim_sample_from_noise(params, schedule, &enc, &x_init, None)?.image)
        })
        .collect()
}
