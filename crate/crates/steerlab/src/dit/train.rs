//! Noise-prediction training loop.
//!
//! Each sample draws a uniform timestep and a Gaussian noise image from its
//! own derived stream, so gradients are independent of worker scheduling;
//! per-sample gradients are summed in batch order before the Adam step, and
//! the whole run is bit-reproducible from `(dataset, settings)`.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use steerlab_nn::{randn, Graph, Rng, Tensor};

use crate::error::Result;
use crate::synth::PromptSpec;

use super::forward::{denoiser_tokens, DitExec, GraphExec};
use super::{patchify, to_diffusion_space, DiffusionSchedule, ModelConfig, ModelParams};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

#[derive(Debug)]
pub struct TrainResult {
    pub params: ModelParams,
    /// Mean loss per epoch.
    pub epoch_losses: Vec<f32>,
    /// Mean loss per optimizer step.
    pub batch_losses: Vec<f32>,
}

impl TrainResult {
    /// Smoothed loss over the first/last `window` optimizer steps; the
    /// training gate compares these.
    pub fn smoothed(&self, window: usize) -> (f32, f32) {
        let n = self.batch_losses.len().min(window).max(1);
        let head: f32 = self.batch_losses.iter().take(n).sum::<f32>() / n as f32;
        let tail: f32 =
            self.batch_losses.iter().rev().take(n).sum::<f32>() / n as f32;
        (head, tail)
    }
}

/// Adam with bias correction; state iterates in parameter-name order.
#[derive(Debug)]
pub struct AdamState {
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
    t: u64,
    beta1: f32,
    beta2: f32,
    eps: f32,
}

impl AdamState {
    pub fn new() -> Self {
        Self { m: BTreeMap::new(), v: BTreeMap::new(), t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &BTreeMap<String, Vec<f32>>,
        lr: f32,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let w = params.get(name)?.clone();
            let next = self.updated(name, &w, g, lr, bc1, bc2);
            params.set(name, Tensor::from_vec(w.shape().to_vec(), next)?)?;
        }
        Ok(())
    }

    /// Same update over a bare tensor map (used by the classifier trainer).
    pub fn step_tensors(
        &mut self,
        tensors: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Vec<f32>>,
        lr: f32,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let w = tensors
                .get(name)
                .cloned()
                .ok_or_else(|| crate::error::LabError::Invalid(format!("unknown tensor `{name}`")))?;
            let next = self.updated(name, &w, g, lr, bc1, bc2);
            tensors.insert(name.clone(), Tensor::from_vec(w.shape().to_vec(), next)?);
        }
        Ok(())
    }

    fn updated(
        &mut self,
        name: &str,
        w: &Tensor,
        g: &[f32],
        lr: f32,
        bc1: f32,
        bc2: f32,
    ) -> Vec<f32> {
        let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
        let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
        let mut next = Vec::with_capacity(g.len());
        for i in 0..g.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            next.push(w.data()[i] - lr * mhat / (vhat.sqrt() + self.eps));
        }
        next
    }
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new()
    }
}

/// One training example: a clean `[0,1]` image and its prompt.
pub type TrainItem = (Tensor, PromptSpec);

fn sample_loss_and_grads(
    params: &ModelParams,
    schedule: &DiffusionSchedule,
    cfg: &ModelConfig,
    item: &TrainItem,
    mut noise_rng: Rng,
) -> Result<(f32, steerlab_nn::Gradients)> {
    let (image, prompt) = item;
    let t = noise_rng.below(cfg.t_train as u64) as usize;
    let eps = randn(&mut noise_rng, &[3, cfg.image_size, cfg.image_size])?;

    let x0 = to_diffusion_space(image)?;
    let a_bar = schedule.alpha_bars[t];
    let (sa, sn) = (a_bar.sqrt(), (1.0 - a_bar).sqrt());
    let xt: Vec<f32> = x0
        .data()
        .iter()
        .zip(eps.data().iter())
        .map(|(&x, &e)| sa * x + sn * e)
        .collect();
    let xt = Tensor::from_vec(x0.shape().to_vec(), xt)?;

    let xt_tokens = patchify(&xt, cfg.patch)?;
    let eps_tokens = patchify(&eps, cfg.patch)?;

    let mut graph = Graph::new();
    let mut exec = GraphExec::new(&mut graph, params);
    let tokens_id = exec.input(xt_tokens);
    let table = exec.param("prompt_embed")?;
    let enc = exec.gather_rows(table, &prompt.tokens)?;
    let out = denoiser_tokens(&mut exec, cfg, tokens_id, t, enc)?;
    let target = graph.input(eps_tokens);
    let loss = graph.mse(out, target)?;
    let loss_value = graph.value(loss).item()?;
    let grads = graph.backward(loss)?;
    Ok((loss_value, grads))
}

/// Train the denoiser on `(image, prompt)` pairs.
///
/// A NaN/Inf anywhere in the forward/backward pass aborts with the
/// offending op in the error.
pub fn train(
    items: &[TrainItem],
    config: &ModelConfig,
    settings: &TrainSettings,
) -> Result<TrainResult> {
    assert!(!items.is_empty(), "empty training split");
    config.validate()?;
    let schedule = DiffusionSchedule::new(config.t_train, config.t_sample)?;
    let root = Rng::new(settings.seed, 0);
    let mut params = ModelParams::init(config, &mut root.derive("init", 0))?;
    let mut adam = AdamState::new();

    let mut batch_losses = Vec::new();
    let mut epoch_losses = Vec::with_capacity(settings.epochs);

    for epoch in 0..settings.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        root.derive("shuffle", epoch as u64).shuffle(&mut order);

        let mut epoch_sum = 0.0f32;
        let mut epoch_batches = 0usize;
        for (batch_idx, chunk) in order.chunks(settings.batch_size.max(1)).enumerate() {
            let jobs: Vec<(usize, usize)> =
                chunk.iter().enumerate().map(|(i, &idx)| (i, idx)).collect();
            let results: Vec<Result<(f32, steerlab_nn::Gradients)>> = jobs
                .par_iter()
                .map(|&(pos_in_batch, idx)| {
                    let label = ((epoch as u64) << 40)
                        | ((batch_idx as u64) << 16)
                        | pos_in_batch as u64;
                    let noise_rng = root.derive("noise", label);
                    sample_loss_and_grads(&params, &schedule, config, &items[idx], noise_rng)
                })
                .collect();

            // deterministic reduction: batch order, then name order
            let mut summed: BTreeMap<String, Vec<f32>> = BTreeMap::new();
            let mut loss_sum = 0.0f32;
            let count = results.len() as f32;
            for res in results {
                let (loss, grads) = res?;
                loss_sum += loss;
                for (name, g) in grads.iter() {
                    match summed.get_mut(name) {
                        Some(acc) => {
                            for (a, &v) in acc.iter_mut().zip(g.data().iter()) {
                                *a += v;
                            }
                        }
                        None => {
                            summed.insert(name.clone(), g.data().to_vec());
                        }
                    }
                }
            }
            for g in summed.values_mut() {
                for v in g.iter_mut() {
                    *v /= count;
                }
            }
            adam.step(&mut params, &summed, settings.lr)?;
            let batch_loss = loss_sum / count;
            batch_losses.push(batch_loss);
            epoch_sum += batch_loss;
            epoch_batches += 1;
        }
        epoch_losses.push(epoch_sum / epoch_batches as f32);
    }

    params.trained = true;
    Ok(TrainResult { params, epoch_losses, batch_losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{render_scene, SceneSpec};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d: 8,
            heads: 2,
            patch: 2,
            d_text: 4,
            image_size: 8,
            t_train: 10,
            t_sample: 4,
        }
    }

    fn tiny_items(n: usize) -> Vec<TrainItem> {
        (0..n)
            .map(|i| {
                let spec = SceneSpec {
                    seed: i as u64,
                    has_lesion: i % 2 == 0,
                    has_dye: false,
                    background_style: 0,
                    image_size: 8,
                };
                let scene = render_scene(&spec).unwrap();
                let prompt = PromptSpec::for_class(spec.class(), i % 3);
                (scene.image, prompt)
            })
            .collect()
    }

    #[test]
    fn training_is_bit_deterministic() {
        let items = tiny_items(6);
        let cfg = tiny_config();
        let settings = TrainSettings { epochs: 2, batch_size: 3, lr: 3e-4, seed: 42 };
        let a = train(&items, &cfg, &settings).unwrap();
        let b = train(&items, &cfg, &settings).unwrap();
        assert_eq!(a.params.checksum(), b.params.checksum());
        assert_eq!(a.batch_losses, b.batch_losses);
        assert!(a.params.trained);
    }

    #[test]
    fn loss_decreases_on_tiny_problem() {
        let items = tiny_items(8);
        let cfg = tiny_config();
        let settings = TrainSettings { epochs: 30, batch_size: 4, lr: 3e-3, seed: 7 };
        let result = train(&items, &cfg, &settings).unwrap();
        let (head, tail) = result.smoothed(8);
        assert!(tail < head, "loss did not decrease: {head} -> {tail}");
    }

    #[test]
    fn adam_moves_toward_minimum() {
        let cfg = tiny_config();
        let mut params = ModelParams::init(&cfg, &mut Rng::new(0, 0)).unwrap();
        let before = params.get("patch_embed.b").unwrap().clone();
        let mut adam = AdamState::new();
        let mut grads = BTreeMap::new();
        grads.insert("patch_embed.b".to_string(), vec![1.0f32; before.numel()]);
        adam.step(&mut params, &grads, 0.1).unwrap();
        let after = params.get("patch_embed.b").unwrap();
        for (&a, &b) in after.data().iter().zip(before.data().iter()) {
            assert!(a < b);
        }
    }
}
