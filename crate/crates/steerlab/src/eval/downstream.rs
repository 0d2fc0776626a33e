//! Quantity-matched augmentation experiment.
//!
//! Augmentation sources are interchangeable strategies behind one trait,
//! registered by name and selected from config strings, so conditions stay
//! directly comparable: each adds the same number of synthetic images and
//! only the *structure* of the additions differs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use steerlab_nn::{randn, Tensor};

use crate::dit::{ddim_sample_from_noise, DiffusionSchedule, ModelParams};
use crate::error::{LabError, Result};
use crate::steer::{generate_pair, sample_rng, PathologyVectorBank, SteerConfig};
use crate::synth::{encode_prompt, PromptSpec, SceneClass, TOKEN_CONCEPT_NORMAL};

use super::metrics::{f1_score, mean_sd, roc_auc};
use super::oracle::{OracleClassifier, OracleSettings};

/// Everything a synthetic-image source may draw on.
pub struct AugmentationContext<'a> {
    pub params: &'a ModelParams,
    pub schedule: &'a DiffusionSchedule,
    pub bank: Option<&'a PathologyVectorBank>,
    pub steer: Option<&'a SteerConfig>,
    /// Base seed for generation; sample `i` uses noise seed `seed + i`.
    pub seed: u64,
}

/// A named way of producing labeled synthetic images
/// (`true` = lesion present).
pub trait AugmentationSource: Sync {
    fn name(&self) -> &'static str;
    fn generate(
        &self,
        ctx: &AugmentationContext<'_>,
        n_synth: usize,
    ) -> Result<Vec<(Tensor, bool)>>;
}

/// No synthetic additions.
struct RealOnly;

impl AugmentationSource for RealOnly {
    fn name(&self) -> &'static str {
        "none"
    }

    fn generate(&self, _ctx: &AugmentationContext<'_>, _n: usize) -> Result<Vec<(Tensor, bool)>> {
        Ok(Vec::new())
    }
}

/// Independent generations of the positive and negative prompt from the
/// same initial noise — the trajectories reroll, nothing is shared beyond
/// the seed.
struct Reprompt;

impl AugmentationSource for Reprompt {
    fn name(&self) -> &'static str {
        "reprompt"
    }

    fn generate(
        &self,
        ctx: &AugmentationContext<'_>,
        n_synth: usize,
    ) -> Result<Vec<(Tensor, bool)>> {
        let table = ctx.params.get("prompt_embed")?;
        let cfg = &ctx.params.config;
        let mut out = Vec::with_capacity(n_synth);
        for i in 0..n_synth / 2 {
            let z = ctx.seed + i as u64;
            let pos = PromptSpec::for_class(SceneClass::Lesion, (z % 3) as usize);
            let neg = pos.with_concept(TOKEN_CONCEPT_NORMAL)?;
            let mut rng = sample_rng(z);
            let x_init = randn(&mut rng, &[3, cfg.image_size, cfg.image_size])?;
            let pos_enc = encode_prompt(&pos, table)?;
            let neg_enc = encode_prompt(&neg, table)?;
            let pos_run =
                ddim_sample_from_noise(ctx.params, ctx.schedule, &pos_enc, &x_init, None)?;
            let neg_run =
                ddim_sample_from_noise(ctx.params, ctx.schedule, &neg_enc, &x_init, None)?;
            out.push((pos_run.image, true));
            out.push((neg_run.image, false));
        }
        Ok(out)
    }
}

/// Shared-trajectory counterfactual pairs: unsteered output labeled
/// positive, steered output labeled negative.
struct CounterfactualPairs;

impl AugmentationSource for CounterfactualPairs {
    fn name(&self) -> &'static str {
        "counterfactual-pairs"
    }

    fn generate(
        &self,
        ctx: &AugmentationContext<'_>,
        n_synth: usize,
    ) -> Result<Vec<(Tensor, bool)>> {
        let bank = ctx
            .bank
            .ok_or_else(|| LabError::Config("counterfactual-pairs needs a vector bank".into()))?;
        let steer = ctx
            .steer
            .ok_or_else(|| LabError::Config("counterfactual-pairs needs a steer config".into()))?;
        let mut out = Vec::with_capacity(n_synth);
        for i in 0..n_synth / 2 {
            let z = ctx.seed + i as u64;
            let pos = PromptSpec::for_class(SceneClass::Lesion, (z % 3) as usize);
            let pair = generate_pair(ctx.params, &pos, bank, steer, ctx.schedule, z)?;
            out.push((pair.unsteered.image, true));
            out.push((pair.steered.image, false));
        }
        Ok(out)
    }
}

/// All augmentation strategies, keyed by config name.
pub fn registry() -> BTreeMap<&'static str, Box<dyn AugmentationSource>> {
    let mut map: BTreeMap<&'static str, Box<dyn AugmentationSource>> = BTreeMap::new();
    for source in [
        Box::new(RealOnly) as Box<dyn AugmentationSource>,
        Box::new(Reprompt),
        Box::new(CounterfactualPairs),
    ] {
        map.insert(source.name(), source);
    }
    map
}

/// Per-condition outcome over the detector seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DownstreamResult {
    pub condition: String,
    pub n_synth: usize,
    pub auc_mean: f32,
    pub auc_sd: f32,
    pub f1_mean: f32,
    pub f1_sd: f32,
    pub per_seed_auc: Vec<f32>,
}

/// Train one binary lesion detector per (condition, seed) on the real items
/// plus that condition's synthetic additions, and score it on the held-out
/// test scenes (unseen background styles). Labels are lesion presence.
pub fn downstream_experiment(
    real: &[(Tensor, bool)],
    test: &[(Tensor, bool)],
    conditions: &[String],
    n_synth: usize,
    detector_seeds: &[u64],
    detector: &OracleSettings,
    ctx: &AugmentationContext<'_>,
) -> Result<Vec<DownstreamResult>> {
    if real.is_empty() || test.is_empty() || detector_seeds.is_empty() {
        return Err(LabError::Invalid("downstream needs real, test, and seeds".into()));
    }
    let sources = registry();
    let mut results = Vec::with_capacity(conditions.len());
    for condition in conditions {
        let source = sources.get(condition.as_str()).ok_or_else(|| {
            LabError::Config(format!(
                "unknown augmentation condition `{condition}` (have: {})",
                sources.keys().copied().collect::<Vec<_>>().join(", ")
            ))
        })?;
        let synth = source.generate(ctx, n_synth)?;

        let mut train_items: Vec<(Tensor, usize)> = Vec::with_capacity(real.len() + synth.len());
        for (img, lesion) in real.iter().chain(synth.iter()) {
            train_items.push((img.clone(), usize::from(*lesion)));
        }
        let val_items: Vec<(Tensor, usize)> =
            test.iter().map(|(img, lesion)| (img.clone(), usize::from(*lesion))).collect();
        let labels: Vec<bool> = test.iter().map(|(_, l)| *l).collect();

        let mut aucs = Vec::with_capacity(detector_seeds.len());
        let mut f1s = Vec::with_capacity(detector_seeds.len());
        for &seed in detector_seeds {
            let settings = OracleSettings { seed, ..*detector };
            let det = OracleClassifier::train(&train_items, &val_items, 2, &settings)?;
            let mut scores = Vec::with_capacity(test.len());
            let mut preds = Vec::with_capacity(test.len());
            for (img, _) in test {
                let p = det.probs(img)?;
                scores.push(p[1]);
                preds.push(p[1] >= 0.5);
            }
            aucs.push(roc_auc(&scores, &labels)?);
            f1s.push(f1_score(&preds, &labels)?);
        }
        let (auc_mean, auc_sd) = mean_sd(&aucs);
        let (f1_mean, f1_sd) = mean_sd(&f1s);
        results.push(DownstreamResult {
            condition: condition.clone(),
            n_synth: synth.len(),
            auc_mean,
            auc_sd,
            f1_mean,
            f1_sd,
            per_seed_auc: aucs,
        });
    }
    Ok(results)
}
