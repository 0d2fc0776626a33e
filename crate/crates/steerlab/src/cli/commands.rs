//! Subcommand implementations: artifact-producing steps.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dit::{train, DiffusionSchedule, ModelParams};
use crate::error::{LabError, Result};
use crate::eval::OracleClassifier;
use crate::img::{write_pgm, write_ppm};
use crate::steer::{
    capture_activations, estimate_vectors, export_sigma_maps, PathologyVectorBank,
};
use crate::synth::{contrastive_pair, make_dataset, render_scene, PromptSpec, Split};
use steerlab_nn::Tensor;

use super::artifacts;
use super::config::RunConfig;

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let json =
        serde_json::to_string_pretty(value).map_err(|e| LabError::json(path, e))?;
    fs::write(path, json).map_err(|e| LabError::io(path, e))?;
    Ok(())
}

/// `gen-data`: corpus manifest plus PPM/PGM exports for every scene.
pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let data = cfg.data()?;
    let records = make_dataset(data.n_per_class, data.split_seed)?;
    cfg.write_resolved()?;
    write_json(&cfg.out_dir.join("manifest.json"), &records)?;

    let scenes_dir = cfg.out_dir.join("scenes");
    fs::create_dir_all(&scenes_dir).map_err(|e| LabError::io(&scenes_dir, e))?;
    let rendered: Vec<Result<()>> = records
        .par_iter()
        .enumerate()
        .map(|(i, record)| {
            let scene = render_scene(&record.spec(data.image_size))?;
            write_ppm(&scenes_dir.join(format!("scene_{i:05}.ppm")), &scene.image)?;
            write_pgm(&scenes_dir.join(format!("scene_{i:05}_lesion.pgm")), &scene.lesion_mask)?;
            write_pgm(&scenes_dir.join(format!("scene_{i:05}_dye.pgm")), &scene.dye_mask)?;
            Ok(())
        })
        .collect();
    for r in rendered {
        r?;
    }
    let count = |s: Split| records.iter().filter(|r| r.split == s).count();
    println!(
        "gen-data: {} scenes (train {}, val {}, test {}) -> {}",
        records.len(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        cfg.out_dir.display()
    );
    Ok(())
}

/// `train`: fit the denoiser on the train split and write the checkpoint.
pub fn train_model(cfg: &RunConfig) -> Result<()> {
    let data = cfg.data()?;
    let model = cfg.model()?;
    let settings = cfg.train_settings()?;
    cfg.write_resolved()?;

    let records = make_dataset(data.n_per_class, data.split_seed)?;
    let scenes = artifacts::render_split(&records, Split::Train, model.image_size)?;
    let items: Vec<(Tensor, PromptSpec)> = scenes
        .into_iter()
        .map(|scene| {
            let prompt = PromptSpec::for_class(scene.spec.class(), (scene.spec.seed % 3) as usize);
            (scene.image, prompt)
        })
        .collect();

    let result = train(&items, model, settings)?;
    let (head, tail) = result.smoothed(50);
    let manifest =
        result.params.manifest(Some(settings.seed), settings.epochs, result.epoch_losses.clone());
    result.params.save(&artifacts::checkpoint_dir(cfg), &manifest)?;
    println!(
        "train: {} items, {} epochs; smoothed loss {head:.4} -> {tail:.4} ({})",
        items.len(),
        settings.epochs,
        if tail < 0.5 * head { "gate met" } else { "gate NOT met" },
    );
    Ok(())
}

/// `train-oracle`: fit the four-class evaluation classifier; reject it if
/// held-out accuracy misses the configured floor.
pub fn train_oracle_cmd(cfg: &RunConfig) -> Result<()> {
    let data = cfg.data()?;
    let eval = cfg.eval()?;
    cfg.write_resolved()?;

    let records = make_dataset(data.n_per_class, data.split_seed)?;
    let to_items = |split: Split| -> Result<Vec<(Tensor, usize)>> {
        Ok(artifacts::render_split(&records, split, data.image_size)?
            .into_iter()
            .map(|s| (s.image, s.spec.class().index()))
            .collect())
    };
    let train_items = to_items(Split::Train)?;
    let val_items = to_items(Split::Val)?;
    let oracle = OracleClassifier::train(&train_items, &val_items, 4, &eval.oracle)?;
    oracle.require_floor(eval.oracle_floor)?;
    oracle.save(&artifacts::oracle_dir(cfg), eval.oracle.seed, eval.oracle.epochs)?;
    println!("train-oracle: accuracy {:.4}, auc {:.4}", oracle.accuracy, oracle.auc);
    Ok(())
}

pub(super) fn estimate_bank_for(
    params: &ModelParams,
    schedule: &DiffusionSchedule,
    concept: &str,
    z: usize,
    base_seed: u64,
    layer_start: usize,
    layer_end: usize,
) -> Result<PathologyVectorBank> {
    let seeds: Vec<u64> = (0..z as u64).map(|i| base_seed + i).collect();
    let mut pos_traces = Vec::with_capacity(z);
    let mut neg_traces = Vec::with_capacity(z);
    // context phrasing varies with the seed so texture marginalizes out
    for ctx in 0..3usize {
        let chunk: Vec<u64> = seeds.iter().copied().filter(|s| (*s % 3) as usize == ctx).collect();
        if chunk.is_empty() {
            continue;
        }
        let (pos, neg) = contrastive_pair(concept, ctx)?;
        pos_traces.extend(capture_activations(params, &pos, &chunk, layer_start, layer_end, schedule)?);
        neg_traces.extend(capture_activations(params, &neg, &chunk, layer_start, layer_end, schedule)?);
    }
    estimate_vectors(&pos_traces, &neg_traces)
}

/// `estimate`: capture activations for the contrastive prompt pair and
/// write the direction bank (or one bank per entry of the Z grid, plus a
/// pairwise-similarity summary).
pub fn estimate(cfg: &RunConfig) -> Result<()> {
    let vectors = cfg.vectors()?;
    let (params, _) = artifacts::load_trained(cfg)?;
    cfg.write_resolved()?;
    let schedule = DiffusionSchedule::new(params.config.t_train, params.config.t_sample)?;

    match &vectors.z_grid {
        None => {
            let bank = estimate_bank_for(
                &params,
                &schedule,
                &vectors.concept,
                vectors.z,
                vectors.seed,
                vectors.layer_start,
                vectors.layer_end,
            )?;
            bank.save(&artifacts::bank_dir(cfg, &vectors.concept, None))?;
            println!(
                "estimate: concept `{}`, Z={}, layers {}..={}",
                vectors.concept, vectors.z, vectors.layer_start, vectors.layer_end
            );
        }
        Some(grid) => {
            let mut banks = Vec::with_capacity(grid.len());
            for &z in grid {
                let bank = estimate_bank_for(
                    &params,
                    &schedule,
                    &vectors.concept,
                    z,
                    vectors.seed,
                    vectors.layer_start,
                    vectors.layer_end,
                )?;
                bank.save(&artifacts::bank_dir(cfg, &vectors.concept, Some(z)))?;
                banks.push((z, bank));
            }
            let mut rows = Vec::new();
            for i in 0..banks.len() {
                for j in i + 1..banks.len() {
                    rows.push(json!({
                        "z_a": banks[i].0,
                        "z_b": banks[j].0,
                        "mean_cosine": banks[i].1.mean_cosine(&banks[j].1),
                    }));
                }
            }
            write_json(&cfg.out_dir.join("bank_z_summary.json"), &rows)?;
            println!("estimate: {} banks over Z grid {:?}", banks.len(), grid);
        }
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct PairRecord {
    index: usize,
    seed: u64,
    prompt: String,
    unsteered: String,
    steered: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct PairSummary {
    alpha: f32,
    n_pairs: usize,
    records: Vec<PairRecord>,
    /// Present only for `alpha = 0` runs: the identity check result.
    alpha_zero_identity: Option<bool>,
    /// Mean gate value per sampler step, averaged over pairs.
    sigma_per_step_mean: Vec<f32>,
    /// Soft observation: did the mean gate shrink from first to last step?
    sigma_sparser_toward_end: bool,
}

/// `pair`: generate a batch of counterfactual pairs and write the images.
pub fn pair(cfg: &RunConfig) -> Result<()> {
    let steer = cfg.steer()?;
    let (params, _) = artifacts::load_trained(cfg)?;
    let bank = artifacts::load_bank(cfg, &steer.concept)?;
    cfg.write_resolved()?;
    let schedule = DiffusionSchedule::new(params.config.t_train, params.config.t_sample)?;

    let pairs = artifacts::gen_pairs(
        &params,
        &schedule,
        &bank,
        &steer.steer_config(),
        &steer.concept,
        steer.n_pairs,
        steer.seed,
    )?;

    let dir = cfg.out_dir.join("pairs");
    fs::create_dir_all(&dir).map_err(|e| LabError::io(&dir, e))?;
    let mut records = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let unsteered = format!("pair_{i:04}_unsteered.ppm");
        let steered_name = format!("pair_{i:04}_steered.ppm");
        write_ppm(&dir.join(&unsteered), &p.unsteered.image)?;
        write_ppm(&dir.join(&steered_name), &p.steered.image)?;
        records.push(PairRecord {
            index: i,
            seed: p.unsteered.seed,
            prompt: p.unsteered.prompt.id(),
            unsteered,
            steered: steered_name,
        });
    }

    let alpha_zero_identity = if steer.alpha == 0.0 {
        let ok = pairs.iter().all(|p| p.unsteered.image.bits_eq(&p.steered.image));
        if !ok {
            return Err(LabError::Invalid(
                "alpha = 0 produced differing branches; shared-trajectory identity violated".into(),
            ));
        }
        Some(ok)
    } else {
        None
    };

    let sigma_means = mean_sigma_per_step(&pairs, schedule.t_sample());
    let sparser = sigma_means.last().zip(sigma_means.first()).map(|(l, f)| l < f).unwrap_or(false);
    let summary = PairSummary {
        alpha: steer.alpha,
        n_pairs: pairs.len(),
        records,
        alpha_zero_identity,
        sigma_per_step_mean: sigma_means,
        sigma_sparser_toward_end: sparser,
    };
    write_json(&dir.join("pairs_manifest.json"), &summary)?;
    println!(
        "pair: {} pairs at alpha {}{}",
        pairs.len(),
        steer.alpha,
        match alpha_zero_identity {
            Some(true) => " (identity verified)",
            _ => "",
        }
    );
    Ok(())
}

pub(super) fn mean_sigma_per_step(
    pairs: &[crate::steer::CounterfactualPair],
    t_sample: usize,
) -> Vec<f32> {
    let mut sums = vec![0.0f32; t_sample];
    let mut counts = vec![0usize; t_sample];
    for p in pairs {
        if let Some(stack) = &p.steered.sigma {
            for (step, mean) in stack.per_step_mean() {
                sums[step - 1] += mean;
                counts[step - 1] += 1;
            }
        }
    }
    sums.iter()
        .zip(counts.iter())
        .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f32 })
        .collect()
}

/// `maps`: steer one pair and export its gate maps per layer.
pub fn maps(cfg: &RunConfig) -> Result<()> {
    let steer = cfg.steer()?;
    let (params, _) = artifacts::load_trained(cfg)?;
    let bank = artifacts::load_bank(cfg, &steer.concept)?;
    cfg.write_resolved()?;
    let schedule = DiffusionSchedule::new(params.config.t_train, params.config.t_sample)?;

    let (pos, _) = contrastive_pair(&steer.concept, (steer.seed % 3) as usize)?;
    let p = crate::steer::generate_pair(
        &params,
        &pos,
        &bank,
        &steer.steer_config(),
        &schedule,
        steer.seed,
    )?;
    let stack = p
        .steered
        .sigma
        .as_ref()
        .ok_or_else(|| LabError::Invalid("steered branch recorded no gate values".into()))?;

    let steps = steer.steer_config().step_set(schedule.t_sample());
    let maps_dir = cfg.out_dir.join("maps");
    let mut indexes = Vec::new();
    for layer in steer.layer_start..=steer.layer_end {
        let layer_dir = maps_dir.join(format!("l{layer}"));
        let index =
            export_sigma_maps(stack, layer, &steps, params.config.image_size, &layer_dir)?;
        indexes.push(index);
    }
    let per_step = stack.per_step_mean();
    let first = per_step.values().next().copied().unwrap_or(0.0);
    let last = per_step.values().last().copied().unwrap_or(0.0);
    write_json(
        &maps_dir.join("summary.json"),
        &json!({
            "layers": (steer.layer_start..=steer.layer_end).collect::<Vec<_>>(),
            "steps": steps,
            "per_step_mean": per_step,
            "first_step_mean": first,
            "last_step_mean": last,
            "sparser_toward_end": last < first,
        }),
    )?;
    println!(
        "maps: exported {} layers x {} steps (first-step mean sigma {:.4}, last-step {:.4})",
        indexes.len(),
        steps.len(),
        first,
        last
    );
    Ok(())
}
