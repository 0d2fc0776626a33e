//! Capture-only hooks and the offline activation-collection pass.

use std::collections::BTreeMap;

use rayon::prelude::*;
use steerlab_nn::{Rng, Tensor};

use crate::dit::{ddim_sample, CaInterceptor, DiffusionSchedule, HookSite, ModelParams};
use crate::error::{LabError, Result};
use crate::synth::{encode_prompt, PromptSpec};

/// Cross-attention features of one unsteered run, complete over the
/// requested `(layer, step)` grid.
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    pub layer_start: usize,
    pub layer_end: usize,
    pub t_sample: usize,
    pub prompt_id: String,
    pub seed: u64,
    entries: BTreeMap<(usize, usize), Tensor>,
}

impl ActivationTrace {
    pub fn get(&self, layer: usize, step: usize) -> Option<&Tensor> {
        self.entries.get(&(layer, step))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&(usize, usize), &Tensor)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Tokens-per-entry; the grid is homogeneous by construction.
    pub fn token_count(&self) -> Result<usize> {
        let first = self
            .entries
            .values()
            .next()
            .ok_or_else(|| LabError::Invalid("empty activation trace".into()))?;
        Ok(first.dims2()?.0)
    }

    /// Hand-constructed traces for oracle tests.
    #[cfg(test)]
    pub(crate) fn test_new(
        seed: u64,
        layer_start: usize,
        layer_end: usize,
        t_sample: usize,
        entries: BTreeMap<(usize, usize), Tensor>,
    ) -> Self {
        Self { layer_start, layer_end, t_sample, prompt_id: "test".into(), seed, entries }
    }
}

/// Observer hook: clones the CA output for sites inside its layer range and
/// passes the tensor through untouched.
pub struct CaptureInterceptor {
    layer_start: usize,
    layer_end: usize,
    captured: BTreeMap<(usize, usize), Tensor>,
}

impl CaptureInterceptor {
    /// `layer_end` inclusive; the range must sit inside `[0, n_layers)`.
    pub fn new(layer_start: usize, layer_end: usize, n_layers: usize) -> Result<Self> {
        if layer_start > layer_end || layer_end >= n_layers {
            return Err(LabError::HookSite(format!(
                "capture layer range {layer_start}..={layer_end} outside [0, {n_layers})"
            )));
        }
        Ok(Self { layer_start, layer_end, captured: BTreeMap::new() })
    }

    pub fn into_captured(self) -> BTreeMap<(usize, usize), Tensor> {
        self.captured
    }
}

impl CaInterceptor for CaptureInterceptor {
    fn intercept(&mut self, site: HookSite, ca_out: Tensor) -> Result<Tensor> {
        if (self.layer_start..=self.layer_end).contains(&site.layer) {
            self.captured.insert((site.layer, site.step), ca_out.clone());
        }
        Ok(ca_out)
    }
}

/// The initial-noise stream for generation seed `z`. Capture and paired
/// generation share this, which is what "same noise seed" means here.
pub fn sample_rng(z: u64) -> Rng {
    Rng::new(z, 0).derive("ddim-init", 0)
}

/// One full unsteered DDIM run per seed, with capture-only hooks over
/// `layers x all sampler steps`. Runs are independent and execute in
/// parallel; the returned traces are ordered by the seed list.
pub fn capture_activations(
    params: &ModelParams,
    prompt: &PromptSpec,
    seeds: &[u64],
    layer_start: usize,
    layer_end: usize,
    schedule: &DiffusionSchedule,
) -> Result<Vec<ActivationTrace>> {
    if seeds.is_empty() {
        return Err(LabError::Invalid("capture needs at least one seed".into()));
    }
    let enc = encode_prompt(prompt, params.get("prompt_embed")?)?;
    let t_sample = schedule.t_sample();
    let n_layers = params.config.n_layers;

    seeds
        .par_iter()
        .map(|&z| {
            let mut hook = CaptureInterceptor::new(layer_start, layer_end, n_layers)?;
            let mut rng = sample_rng(z);
            ddim_sample(params, schedule, &enc, &mut rng, Some(&mut hook))?;
            let entries = hook.into_captured();
            let expected = (layer_end - layer_start + 1) * t_sample;
            if entries.len() != expected {
                return Err(LabError::Invalid(format!(
                    "trace incomplete: {} of {expected} sites captured",
                    entries.len()
                )));
            }
            Ok(ActivationTrace {
                layer_start,
                layer_end,
                t_sample,
                prompt_id: prompt.id(),
                seed: z,
                entries,
            })
        })
        .collect()
}
