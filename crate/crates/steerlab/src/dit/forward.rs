//! Denoiser forward pass.
//!
//! The block math is written once, over a small executor trait, and run by
//! two executors: a pure tensor evaluator (inference, with hook dispatch at
//! the CA output site) and a tape builder (training). Both call the same
//! kernels in the same order, so their outputs are bit-identical — a
//! property the tests pin down.

use std::collections::BTreeMap;

use steerlab_nn::{ops, Graph, NodeId, Tensor};

use crate::error::{LabError, Result};

use super::{HookSite, ModelConfig, ModelParams};

/// Observer/rewriter for cross-attention outputs.
///
/// Receives the `[tokens, d]` CA output (after the output projection, before
/// the residual add) at every `(layer, step)` site of a run, and returns the
/// tensor to use in its place. Returning the input unchanged makes the hook
/// invisible: identity interception is bit-transparent.
pub trait CaInterceptor {
    fn intercept(&mut self, site: HookSite, ca_out: Tensor) -> Result<Tensor>;
}

/// One forward pass worth of hook context: the interceptor plus the sampler
/// step (1-based, step 1 = noisiest) used to address sites.
pub struct HookRun<'a> {
    pub interceptor: &'a mut dyn CaInterceptor,
    pub step: usize,
}

/// Minimal op surface the denoiser needs; implemented by the pure evaluator
/// and by the autodiff tape.
pub(super) trait DitExec {
    type Id: Copy;
    fn input(&mut self, t: Tensor) -> Self::Id;
    fn param(&mut self, name: &str) -> Result<Self::Id>;
    fn matmul(&mut self, a: Self::Id, b: Self::Id) -> Result<Self::Id>;
    fn matmul_nt(&mut self, a: Self::Id, b: Self::Id) -> Result<Self::Id>;
    fn add(&mut self, a: Self::Id, b: Self::Id) -> Result<Self::Id>;
    fn add_bias(&mut self, a: Self::Id, bias: Self::Id) -> Result<Self::Id>;
    fn scale(&mut self, a: Self::Id, c: f32) -> Result<Self::Id>;
    fn softmax_rows(&mut self, a: Self::Id) -> Result<Self::Id>;
    fn layer_norm(&mut self, x: Self::Id, gain: Self::Id, bias: Self::Id) -> Result<Self::Id>;
    fn gelu(&mut self, a: Self::Id) -> Result<Self::Id>;
    fn slice2(&mut self, a: Self::Id, axis: usize, start: usize, end: usize) -> Result<Self::Id>;
    fn reshape(&mut self, a: Self::Id, shape: Vec<usize>) -> Result<Self::Id>;
    fn gather_rows(&mut self, table: Self::Id, ids: &[usize]) -> Result<Self::Id>;
    /// Hook point: called with the CA output of `layer`, may replace it.
    fn ca_site(&mut self, layer: usize, ca_out: Self::Id) -> Result<Self::Id>;
}

/// Multi-head attention with separate query and key/value sources.
/// Heads are column slices; their output-projection contributions are
/// accumulated in head order.
fn attention<E: DitExec>(
    e: &mut E,
    cfg: &ModelConfig,
    q_src: E::Id,
    kv_src: E::Id,
    prefix: &str,
) -> Result<E::Id> {
    let wq = e.param(&format!("{prefix}.wq"))?;
    let bq = e.param(&format!("{prefix}.bq"))?;
    let wk = e.param(&format!("{prefix}.wk"))?;
    let bk = e.param(&format!("{prefix}.bk"))?;
    let wv = e.param(&format!("{prefix}.wv"))?;
    let bv = e.param(&format!("{prefix}.bv"))?;
    let wo = e.param(&format!("{prefix}.wo"))?;
    let bo = e.param(&format!("{prefix}.bo"))?;

    let q = e.matmul(q_src, wq)?;
    let q = e.add_bias(q, bq)?;
    let k = e.matmul(kv_src, wk)?;
    let k = e.add_bias(k, bk)?;
    let v = e.matmul(kv_src, wv)?;
    let v = e.add_bias(v, bv)?;

    let hd = cfg.head_dim();
    let inv_sqrt = 1.0 / (hd as f32).sqrt();
    let mut out: Option<E::Id> = None;
    for h in 0..cfg.heads {
        let (lo, hi) = (h * hd, (h + 1) * hd);
        let qh = e.slice2(q, 1, lo, hi)?;
        let kh = e.slice2(k, 1, lo, hi)?;
        let vh = e.slice2(v, 1, lo, hi)?;
        let scores = e.matmul_nt(qh, kh)?;
        let scores = e.scale(scores, inv_sqrt)?;
        let attn = e.softmax_rows(scores)?;
        let oh = e.matmul(attn, vh)?;
        let wo_h = e.slice2(wo, 0, lo, hi)?;
        let contrib = e.matmul(oh, wo_h)?;
        out = Some(match out {
            None => contrib,
            Some(acc) => e.add(acc, contrib)?,
        });
    }
    e.add_bias(out.expect("at least one head"), bo)
}

fn layer_norm_named<E: DitExec>(e: &mut E, x: E::Id, name: &str) -> Result<E::Id> {
    let gain = e.param(&format!("{name}.gain"))?;
    let bias = e.param(&format!("{name}.bias"))?;
    e.layer_norm(x, gain, bias)
}

/// Token-space denoiser: `[tokens, patch_dim] -> [tokens, patch_dim]`.
pub(super) fn denoiser_tokens<E: DitExec>(
    e: &mut E,
    cfg: &ModelConfig,
    tokens: E::Id,
    timestep: usize,
    prompt_enc: E::Id,
) -> Result<E::Id> {
    if timestep >= cfg.t_train {
        return Err(LabError::Invalid(format!(
            "timestep {timestep} outside schedule of {}",
            cfg.t_train
        )));
    }
    let wpe = e.param("patch_embed.w")?;
    let bpe = e.param("patch_embed.b")?;
    let mut x = e.matmul(tokens, wpe)?;
    x = e.add_bias(x, bpe)?;

    // timestep embedding added to every token
    let table = e.param("time_embed")?;
    let t_row = e.slice2(table, 0, timestep, timestep + 1)?;
    let t_row = e.reshape(t_row, vec![cfg.d])?;
    x = e.add_bias(x, t_row)?;

    for l in 0..cfg.n_layers {
        let a = layer_norm_named(e, x, &format!("layer{l}.ln_sa"))?;
        let sa = attention(e, cfg, a, a, &format!("layer{l}.sa"))?;
        x = e.add(x, sa)?;

        let a = layer_norm_named(e, x, &format!("layer{l}.ln_ca"))?;
        let ca = attention(e, cfg, a, prompt_enc, &format!("layer{l}.ca"))?;
        let ca = e.ca_site(l, ca)?;
        x = e.add(x, ca)?;

        let a = layer_norm_named(e, x, &format!("layer{l}.ln_ff"))?;
        let w1 = e.param(&format!("layer{l}.ff.w1"))?;
        let b1 = e.param(&format!("layer{l}.ff.b1"))?;
        let w2 = e.param(&format!("layer{l}.ff.w2"))?;
        let b2 = e.param(&format!("layer{l}.ff.b2"))?;
        let h = e.matmul(a, w1)?;
        let h = e.add_bias(h, b1)?;
        let h = e.gelu(h)?;
        let f = e.matmul(h, w2)?;
        let f = e.add_bias(f, b2)?;
        x = e.add(x, f)?;
    }

    let wu = e.param("unembed.w")?;
    let bu = e.param("unembed.b")?;
    let out = e.matmul(x, wu)?;
    e.add_bias(out, bu)
}

// ── pure executor ────────────────────────────────────────────────────

pub(super) struct PureExec<'p, 'h> {
    params: &'p ModelParams,
    values: Vec<Tensor>,
    param_ids: BTreeMap<String, usize>,
    hooks: Option<HookRun<'h>>,
}

impl<'p, 'h> PureExec<'p, 'h> {
    pub(super) fn new(params: &'p ModelParams, hooks: Option<HookRun<'h>>) -> Self {
        Self { params, values: Vec::new(), param_ids: BTreeMap::new(), hooks }
    }

    pub(super) fn value(&self, id: usize) -> &Tensor {
        &self.values[id]
    }

    fn push(&mut self, t: Tensor) -> usize {
        self.values.push(t);
        self.values.len() - 1
    }
}

impl<'p, 'h> DitExec for PureExec<'p, 'h> {
    type Id = usize;

    fn input(&mut self, t: Tensor) -> usize {
        self.push(t)
    }

    fn param(&mut self, name: &str) -> Result<usize> {
        if let Some(&id) = self.param_ids.get(name) {
            return Ok(id);
        }
        let t = self.params.get(name)?.clone();
        let id = self.push(t);
        self.param_ids.insert(name.to_string(), id);
        Ok(id)
    }

    fn matmul(&mut self, a: usize, b: usize) -> Result<usize> {
        let t = ops::matmul(&self.values[a], &self.values[b])?;
        Ok(self.push(t))
    }

    fn matmul_nt(&mut self, a: usize, b: usize) -> Result<usize> {
        let t = ops::matmul_nt(&self.values[a], &self.values[b])?;
        Ok(self.push(t))
    }

    fn add(&mut self, a: usize, b: usize) -> Result<usize> {
        let t = ops::add(&self.values[a], &self.values[b])?;
        Ok(self.push(t))
    }

    fn add_bias(&mut self, a: usize, bias: usize) -> Result<usize> {
        let t = ops::add_bias(&self.values[a], &self.values[bias])?;
        Ok(self.push(t))
    }

    fn scale(&mut self, a: usize, c: f32) -> Result<usize> {
        let t = ops::scale(&self.values[a], c)?;
        Ok(self.push(t))
    }

    fn softmax_rows(&mut self, a: usize) -> Result<usize> {
        let t = ops::softmax_rows(&self.values[a])?;
        Ok(self.push(t))
    }

    fn layer_norm(&mut self, x: usize, gain: usize, bias: usize) -> Result<usize> {
        let t = ops::layer_norm(&self.values[x], &self.values[gain], &self.values[bias])?;
        Ok(self.push(t))
    }

    fn gelu(&mut self, a: usize) -> Result<usize> {
        let t = ops::gelu(&self.values[a])?;
        Ok(self.push(t))
    }

    fn slice2(&mut self, a: usize, axis: usize, start: usize, end: usize) -> Result<usize> {
        let t = ops::slice2(&self.values[a], axis, start, end)?;
        Ok(self.push(t))
    }

    fn reshape(&mut self, a: usize, shape: Vec<usize>) -> Result<usize> {
        let t = self.values[a].reshape(shape)?;
        Ok(self.push(t))
    }

    fn gather_rows(&mut self, table: usize, ids: &[usize]) -> Result<usize> {
        let t = ops::gather_rows(&self.values[table], ids)?;
        Ok(self.push(t))
    }

    fn ca_site(&mut self, layer: usize, ca_out: usize) -> Result<usize> {
        match &mut self.hooks {
            None => Ok(ca_out),
            Some(run) => {
                let site = HookSite { layer, step: run.step };
                let replaced = run.interceptor.intercept(site, self.values[ca_out].clone())?;
                if replaced.shape() != self.values[ca_out].shape() {
                    return Err(LabError::HookSite(format!(
                        "interceptor at layer {layer} changed shape {:?} -> {:?}",
                        self.values[ca_out].shape(),
                        replaced.shape()
                    )));
                }
                Ok(self.push(replaced))
            }
        }
    }
}

// ── tape executor ────────────────────────────────────────────────────

pub(super) struct GraphExec<'a> {
    pub(super) graph: &'a mut Graph,
    params: &'a ModelParams,
    param_ids: BTreeMap<String, NodeId>,
}

impl<'a> GraphExec<'a> {
    pub(super) fn new(graph: &'a mut Graph, params: &'a ModelParams) -> Self {
        Self { graph, params, param_ids: BTreeMap::new() }
    }
}

impl<'a> DitExec for GraphExec<'a> {
    type Id = NodeId;

    fn input(&mut self, t: Tensor) -> NodeId {
        self.graph.input(t)
    }

    fn param(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.param_ids.get(name) {
            return Ok(id);
        }
        let id = self.graph.param(name, self.params.get(name)?.clone());
        self.param_ids.insert(name.to_string(), id);
        Ok(id)
    }

    fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        Ok(self.graph.matmul(a, b)?)
    }

    fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        Ok(self.graph.matmul_nt(a, b)?)
    }

    fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        Ok(self.graph.add(a, b)?)
    }

    fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        Ok(self.graph.add_bias(a, bias)?)
    }

    fn scale(&mut self, a: NodeId, c: f32) -> Result<NodeId> {
        Ok(self.graph.scale(a, c)?)
    }

    fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        Ok(self.graph.softmax_rows(a)?)
    }

    fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        Ok(self.graph.layer_norm(x, gain, bias)?)
    }

    fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        Ok(self.graph.gelu(a)?)
    }

    fn slice2(&mut self, a: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        Ok(self.graph.slice2(a, axis, start, end)?)
    }

    fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        Ok(self.graph.reshape(a, shape)?)
    }

    fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        Ok(self.graph.gather_rows(table, ids)?)
    }

    fn ca_site(&mut self, _layer: usize, ca_out: NodeId) -> Result<NodeId> {
        Ok(ca_out)
    }
}

// ── public surface ───────────────────────────────────────────────────

/// Split `[3, h, w]` into a row-major grid of flattened patches
/// (`channel, then y, then x` within a patch) -> `[tokens, 3*p*p]`.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    if c != 3 || h % patch != 0 || w % patch != 0 {
        return Err(LabError::Invalid(format!(
            "cannot patchify {:?} with patch {patch}",
            image.shape()
        )));
    }
    let grid_y = h / patch;
    let grid_x = w / patch;
    let d = image.data();
    let mut out = Vec::with_capacity(3 * h * w);
    for gy in 0..grid_y {
        for gx in 0..grid_x {
            for ch in 0..3 {
                for py in 0..patch {
                    for px in 0..patch {
                        out.push(d[(ch * h + gy * patch + py) * w + gx * patch + px]);
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(vec![grid_y * grid_x, 3 * patch * patch], out)?)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, patch: usize, image_size: usize) -> Result<Tensor> {
    let (n, pd) = tokens.dims2()?;
    let grid = image_size / patch;
    if n != grid * grid || pd != 3 * patch * patch || image_size % patch != 0 {
        return Err(LabError::Invalid(format!(
            "cannot unpatchify {:?} into {image_size}px image with patch {patch}",
            tokens.shape()
        )));
    }
    let d = tokens.data();
    let mut out = vec![0.0f32; 3 * image_size * image_size];
    for gy in 0..grid {
        for gx in 0..grid {
            let tok = gy * grid + gx;
            let mut idx = tok * pd;
            for ch in 0..3 {
                for py in 0..patch {
                    for px in 0..patch {
                        out[(ch * image_size + gy * patch + py) * image_size + gx * patch + px] =
                            d[idx];
                        idx += 1;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(vec![3, image_size, image_size], out)?)
}

/// One denoiser evaluation: noisy patch tokens in, predicted noise image out.
///
/// Interceptors (if any) see each layer's CA output at the run's sampler
/// step and may replace it.
pub fn forward_denoiser(
    params: &ModelParams,
    noisy_tokens: &Tensor,
    timestep: usize,
    prompt_enc: &Tensor,
    hooks: Option<HookRun<'_>>,
) -> Result<Tensor> {
    let cfg = &params.config;
    if noisy_tokens.shape() != [cfg.tokens(), cfg.patch_dim()] {
        return Err(LabError::Invalid(format!(
            "noisy tokens {:?}, expected [{}, {}]",
            noisy_tokens.shape(),
            cfg.tokens(),
            cfg.patch_dim()
        )));
    }
    let mut exec = PureExec::new(params, hooks);
    let tokens = exec.input(noisy_tokens.clone());
    let enc = exec.input(prompt_enc.clone());
    let out = denoiser_tokens(&mut exec, cfg, tokens, timestep, enc)?;
    unpatchify(exec.value(out), cfg.patch, cfg.image_size)
}
