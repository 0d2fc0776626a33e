//! Reverse-mode differentiation over a fixed op set.
//!
//! A `Graph` is a tape: ops execute eagerly during the forward pass and
//! record their inputs; `backward` then walks the tape in exact reverse
//! creation order, accumulating gradients additively. Both directions use
//! fixed summation orders, so gradients are bit-reproducible.

use std::collections::BTreeMap;

use crate::error::{NnError, Result};
use crate::ops;
use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    MatmulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    SoftmaxRows(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    Gelu(NodeId),
    Reshape(NodeId),
    Slice2 { a: NodeId, axis: usize, start: usize, end: usize },
    GatherRows { table: NodeId, ids: Vec<usize> },
    MeanAll(NodeId),
    SumAll(NodeId),
    Mse(NodeId, NodeId),
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize },
    GlobalAvgPool(NodeId),
    GlobalMaxPool(NodeId),
    CrossEntropyLogits { logits: NodeId, targets: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Wengert tape over the fixed op set used by the models here.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    /// Non-trainable leaf.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Named trainable leaf.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        let id = self.push(Op::Leaf, value);
        self.params.push((name.into(), id));
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Matmul(a, b), v))
    }

    /// `a x b^T`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatmulNt(a, b), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = ops::add_bias(self.value(a), self.value(bias))?;
        Ok(self.push(Op::AddBias(a, bias), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: NodeId, c: f32) -> Result<NodeId> {
        let v = ops::scale(self.value(a), c)?;
        Ok(self.push(Op::Scale(a, c), v))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = ops::softmax_rows(self.value(a))?;
        Ok(self.push(Op::SoftmaxRows(a), v))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = ops::layer_norm(self.value(x), self.value(gain), self.value(bias))?;
        Ok(self.push(Op::LayerNorm { x, gain, bias }, v))
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = ops::gelu(self.value(a))?;
        Ok(self.push(Op::Gelu(a), v))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(Op::Reshape(a), v))
    }

    pub fn slice2(&mut self, a: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        let v = ops::slice2(self.value(a), axis, start, end)?;
        Ok(self.push(Op::Slice2 { a, axis, start, end }, v))
    }

    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let v = ops::gather_rows(self.value(table), ids)?;
        Ok(self.push(Op::GatherRows { table, ids: ids.to_vec() }, v))
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let v = ops::mean_all(self.value(a))?;
        Ok(self.push(Op::MeanAll(a), v))
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let v = ops::sum_all(self.value(a))?;
        Ok(self.push(Op::SumAll(a), v))
    }

    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::mse(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mse(a, b), v))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let v = ops::conv2d(self.value(x), self.value(w), self.value(b), stride, pad)?;
        Ok(self.push(Op::Conv2d { x, w, b, stride, pad }, v))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let v = ops::global_avg_pool(self.value(x))?;
        Ok(self.push(Op::GlobalAvgPool(x), v))
    }

    pub fn global_max_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let v = ops::global_max_pool(self.value(x))?;
        Ok(self.push(Op::GlobalMaxPool(x), v))
    }

    pub fn cross_entropy_logits(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let v = ops::cross_entropy_logits(self.value(logits), targets)?;
        Ok(self.push(Op::CrossEntropyLogits { logits, targets: targets.to_vec() }, v))
    }

    /// Reverse pass from a scalar loss node.
    ///
    /// Parameters that do not influence the loss get a zero gradient.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(NnError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            let Some(gout) = grads[id].take() else { continue };
            self.propagate(id, &gout, &mut grads)?;
            grads[id] = Some(gout);
        }

        let mut named = BTreeMap::new();
        for (name, id) in &self.params {
            let t = match &grads[*id] {
                Some(g) => Tensor::from_vec(self.value(*id).shape().to_vec(), g.clone())?,
                None => Tensor::zeros(self.value(*id).shape().to_vec()),
            };
            named.insert(name.clone(), t);
        }
        Ok(Gradients { named })
    }

    fn propagate(&self, id: NodeId, gout: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let g = Tensor::from_vec(self.value(id).shape().to_vec(), gout.to_vec())?;
                let da = ops::matmul_nt(&g, self.value(*b))?;
                let db = ops::matmul_tn(self.value(*a), &g)?;
                accumulate(grads, *a, da.data());
                accumulate(grads, *b, db.data());
            }
            Op::MatmulNt(a, b) => {
                let g = Tensor::from_vec(self.value(id).shape().to_vec(), gout.to_vec())?;
                let da = ops::matmul(&g, self.value(*b))?;
                let db = ops::matmul_tn(&g, self.value(*a))?;
                accumulate(grads, *a, da.data());
                accumulate(grads, *b, db.data());
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, gout);
                accumulate(grads, *b, gout);
            }
            Op::AddBias(a, bias) => {
                accumulate(grads, *a, gout);
                let (m, n) = self.value(*a).dims2()?;
                let mut db = vec![0.0f32; n];
                for i in 0..m {
                    for j in 0..n {
                        db[j] += gout[i * n + j];
                    }
                }
                accumulate(grads, *bias, &db);
            }
            Op::Mul(a, b) => {
                let bd = self.value(*b).data();
                let ad = self.value(*a).data();
                let da: Vec<f32> = gout.iter().zip(bd.iter()).map(|(&g, &v)| g * v).collect();
                let db: Vec<f32> = gout.iter().zip(ad.iter()).map(|(&g, &v)| g * v).collect();
                accumulate(grads, *a, &da);
                accumulate(grads, *b, &db);
            }
            Op::Scale(a, c) => {
                let da: Vec<f32> = gout.iter().map(|&g| g * c).collect();
                accumulate(grads, *a, &da);
            }
            Op::SoftmaxRows(a) => {
                let s = self.value(id).data();
                let (m, n) = self.value(id).dims2()?;
                let mut da = vec![0.0f32; m * n];
                for i in 0..m {
                    let srow = &s[i * n..(i + 1) * n];
                    let grow = &gout[i * n..(i + 1) * n];
                    let mut dot = 0.0f32;
                    for (&g, &sv) in grow.iter().zip(srow.iter()) {
                        dot += g * sv;
                    }
                    for j in 0..n {
                        da[i * n + j] = srow[j] * (grow[j] - dot);
                    }
                }
                accumulate(grads, *a, &da);
            }
            Op::LayerNorm { x, gain, bias } => {
                self.layer_norm_backward(*x, *gain, *bias, gout, grads)?;
            }
            Op::Gelu(a) => {
                let xd = self.value(*a).data();
                let da: Vec<f32> =
                    gout.iter().zip(xd.iter()).map(|(&g, &x)| g * ops::gelu_grad_scalar(x)).collect();
                accumulate(grads, *a, &da);
            }
            Op::Reshape(a) => {
                accumulate(grads, *a, gout);
            }
            Op::Slice2 { a, axis, start, end } => {
                let (m, n) = self.value(*a).dims2()?;
                let mut da = vec![0.0f32; m * n];
                if *axis == 0 {
                    da[start * n..end * n].copy_from_slice(gout);
                } else {
                    let width = end - start;
                    for i in 0..m {
                        da[i * n + start..i * n + end]
                            .copy_from_slice(&gout[i * width..(i + 1) * width]);
                    }
                }
                accumulate(grads, *a, &da);
            }
            Op::GatherRows { table, ids } => {
                let (v, d) = self.value(*table).dims2()?;
                let mut dt = vec![0.0f32; v * d];
                for (i, &row) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[row * d + j] += gout[i * d + j];
                    }
                }
                accumulate(grads, *table, &dt);
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).numel();
                let g = gout[0] / n as f32;
                accumulate(grads, *a, &vec![g; n]);
            }
            Op::SumAll(a) => {
                let n = self.value(*a).numel();
                accumulate(grads, *a, &vec![gout[0]; n]);
            }
            Op::Mse(a, b) => {
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                let n = ad.len() as f32;
                let c = 2.0 * gout[0] / n;
                let da: Vec<f32> = ad.iter().zip(bd.iter()).map(|(&x, &y)| c * (x - y)).collect();
                let db: Vec<f32> = da.iter().map(|&v| -v).collect();
                accumulate(grads, *a, &da);
                accumulate(grads, *b, &db);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                self.conv2d_backward(*x, *w, *b, *stride, *pad, id, gout, grads)?;
            }
            Op::GlobalAvgPool(x) => {
                let (c, h, wd) = self.value(*x).dims3()?;
                let hw = (h * wd) as f32;
                let mut dx = vec![0.0f32; c * h * wd];
                for ch in 0..c {
                    let g = gout[ch] / hw;
                    for v in &mut dx[ch * h * wd..(ch + 1) * h * wd] {
                        *v = g;
                    }
                }
                accumulate(grads, *x, &dx);
            }
            Op::GlobalMaxPool(x) => {
                let (c, h, wd) = self.value(*x).dims3()?;
                let (_, argmax) = ops::global_max_pool_with_argmax(self.value(*x))?;
                let mut dx = vec![0.0f32; c * h * wd];
                for ch in 0..c {
                    dx[ch * h * wd + argmax[ch]] = gout[ch];
                }
                accumulate(grads, *x, &dx);
            }
            Op::CrossEntropyLogits { logits, targets } => {
                let probs = ops::softmax_rows(self.value(*logits))?;
                let (n, k) = probs.dims2()?;
                let c = gout[0] / n as f32;
                let mut dl = probs.data().to_vec();
                for (r, &t) in targets.iter().enumerate() {
                    dl[r * k + t] -= 1.0;
                }
                for v in &mut dl {
                    *v *= c;
                }
                accumulate(grads, *logits, &dl);
            }
        }
        Ok(())
    }

    fn layer_norm_backward(
        &self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        gout: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) -> Result<()> {
        let xt = self.value(x);
        let d = *xt.shape().last().unwrap();
        let rows = xt.numel() / d;
        let xd = xt.data();
        let gd = self.value(gain).data();

        let mut dx = vec![0.0f32; xt.numel()];
        let mut dgain = vec![0.0f32; d];
        let mut dbias = vec![0.0f32; d];

        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let grow = &gout[r * d..(r + 1) * d];
            let mut mean = 0.0f32;
            for &v in row {
                mean += v;
            }
            mean /= d as f32;
            let mut var = 0.0f32;
            for &v in row {
                let c = v - mean;
                var += c * c;
            }
            var /= d as f32;
            let inv_std = 1.0 / (var + ops::LAYER_NORM_EPS).sqrt();

            // xh = normalized input; dxh = upstream grad through the affine
            let mut m1 = 0.0f32; // mean of dxh
            let mut m2 = 0.0f32; // mean of dxh * xh
            for j in 0..d {
                let xh = (row[j] - mean) * inv_std;
                let dxh = grow[j] * gd[j];
                m1 += dxh;
                m2 += dxh * xh;
                dgain[j] += grow[j] * xh;
                dbias[j] += grow[j];
            }
            m1 /= d as f32;
            m2 /= d as f32;
            for j in 0..d {
                let xh = (row[j] - mean) * inv_std;
                let dxh = grow[j] * gd[j];
                dx[r * d + j] = (dxh - m1 - xh * m2) * inv_std;
            }
        }
        accumulate(grads, x, &dx);
        accumulate(grads, gain, &dgain);
        accumulate(grads, bias, &dbias);
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
        out: NodeId,
        gout: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) -> Result<()> {
        let (c_in, h, wd) = self.value(x).dims3()?;
        let ws = self.value(w).shape().to_vec();
        let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
        let (_, oh, ow) = self.value(out).dims3()?;
        let xd = self.value(x).data();
        let wv = self.value(w).data();

        let mut dx = vec![0.0f32; c_in * h * wd];
        let mut dw = vec![0.0f32; c_out * c_in * kh * kw];
        let mut db = vec![0.0f32; c_out];

        for oc in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = gout[(oc * oh + oy) * ow + ox];
                    db[oc] += g;
                    for ic in 0..c_in {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xi = (ic * h + iy as usize) * wd + ix as usize;
                                let wi = ((oc * c_in + ic) * kh + ky) * kw + kx;
                                dw[wi] += g * xd[xi];
                                dx[xi] += g * wv[wi];
                            }
                        }
                    }
                }
            }
        }
        accumulate(grads, x, &dx);
        accumulate(grads, w, &dw);
        accumulate(grads, b, &db);
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], id: NodeId, contribution: &[f32]) {
    match &mut grads[id] {
        Some(buf) => {
            for (b, &c) in buf.iter_mut().zip(contribution.iter()) {
                *b += c;
            }
        }
        None => grads[id] = Some(contribution.to_vec()),
    }
}

/// Per-parameter gradients keyed by parameter name.
#[derive(Debug)]
pub struct Gradients {
    named: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.named.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.named.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{randn, Rng};

    #[test]
    fn sum_of_param_gives_ones() {
        let mut g = Graph::new();
        let p = g.param("p", Tensor::from_vec(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let loss = g.sum_all(p).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("p").unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn mse_against_zero_is_two_p() {
        let mut g = Graph::new();
        let p = g.param("p", Tensor::from_vec(vec![1], vec![2.0]).unwrap());
        let zero = g.input(Tensor::zeros(vec![1]));
        let loss = g.mse(p, zero).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("p").unwrap().data(), &[4.0]);
    }

    #[test]
    fn disconnected_param_gets_zero_gradient() {
        let mut g = Graph::new();
        let p = g.param("used", Tensor::scalar(3.0).unwrap());
        let _unused = g.param("unused", Tensor::scalar(5.0).unwrap());
        let loss = g.sum_all(p).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("unused").unwrap().data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let p = g.param("p", Tensor::zeros(vec![2]));
        assert!(matches!(g.backward(p), Err(NnError::NonScalarLoss(_))));
    }

    /// Central finite differences on the rebuilt forward pass.
    fn finite_diff<F>(build: F, values: &mut Vec<f32>, h: f32) -> Vec<f32>
    where
        F: Fn(&[f32]) -> f32,
    {
        let mut fd = Vec::with_capacity(values.len());
        for i in 0..values.len() {
            let orig = values[i];
            values[i] = orig + h;
            let up = build(values);
            values[i] = orig - h;
            let down = build(values);
            values[i] = orig;
            fd.push((up - down) / (2.0 * h));
        }
        fd
    }

    /// A composite touching matmul/add_bias/gelu/layer_norm/softmax/slice/
    /// gather/mul/scale/mse in one loss, finite-difference checked end to end.
    #[test]
    fn composite_graph_matches_finite_differences() {
        let mut rng = Rng::new(77, 0);
        let w0 = randn(&mut rng, &[4, 6]).unwrap().data().to_vec();
        let x = randn(&mut rng, &[3, 4]).unwrap();
        let gain = randn(&mut rng, &[6]).unwrap();
        let bias = randn(&mut rng, &[6]).unwrap();
        let target = randn(&mut rng, &[3, 2]).unwrap();

        let eval = |wdata: &[f32]| -> f32 {
            let mut g = Graph::new();
            let w = g.param("w", Tensor::from_vec(vec![4, 6], wdata.to_vec()).unwrap());
            let xi = g.input(x.clone());
            let gi = g.input(gain.clone());
            let bi = g.input(bias.clone());
            let ti = g.input(target.clone());
            let h = g.matmul(xi, w).unwrap();
            let h = g.layer_norm(h, gi, bi).unwrap();
            let h = g.gelu(h).unwrap();
            let s = g.softmax_rows(h).unwrap();
            let left = g.slice2(s, 1, 0, 2).unwrap();
            let right = g.slice2(s, 1, 2, 4).unwrap();
            let prod = g.mul(left, right).unwrap();
            let prod = g.scale(prod, 1.7).unwrap();
            let loss = g.mse(prod, ti).unwrap();
            g.value(loss).item().unwrap()
        };

        let mut g = Graph::new();
        let w = g.param("w", Tensor::from_vec(vec![4, 6], w0.clone()).unwrap());
        let xi = g.input(x.clone());
        let gi = g.input(gain.clone());
        let bi = g.input(bias.clone());
        let ti = g.input(target.clone());
        let h = g.matmul(xi, w).unwrap();
        let h = g.layer_norm(h, gi, bi).unwrap();
        let h = g.gelu(h).unwrap();
        let s = g.softmax_rows(h).unwrap();
        let left = g.slice2(s, 1, 0, 2).unwrap();
        let right = g.slice2(s, 1, 2, 4).unwrap();
        let prod = g.mul(left, right).unwrap();
        let prod = g.scale(prod, 1.7).unwrap();
        let loss = g.mse(prod, ti).unwrap();
        let grads = g.backward(loss).unwrap();
        let ad = grads.get("w").unwrap().data().to_vec();

        let mut vals = w0;
        let fd = finite_diff(eval, &mut vals, 1e-2);
        for (i, (&a, &f)) in ad.iter().zip(fd.iter()).enumerate() {
            let denom = a.abs().max(f.abs()).max(1e-2);
            assert!(
                ((a - f) / denom).abs() < 1e-2,
                "w[{i}]: autodiff {a} vs finite-diff {f}"
            );
        }
    }

    #[test]
    fn conv_and_pool_match_finite_differences() {
        // finite differences through max pool are valid while the argmax is
        // stable; h = 1e-2 on these random inputs stays inside one basin
        let mut rng = Rng::new(5, 1);
        let x = randn(&mut rng, &[2, 5, 5]).unwrap();
        let w0 = randn(&mut rng, &[3, 2, 3, 3]).unwrap().data().to_vec();
        let b0 = randn(&mut rng, &[3]).unwrap();

        let eval = |wdata: &[f32]| -> f32 {
            let mut g = Graph::new();
            let w = g.param("w", Tensor::from_vec(vec![3, 2, 3, 3], wdata.to_vec()).unwrap());
            let xi = g.input(x.clone());
            let bi = g.input(b0.clone());
            let y = g.conv2d(xi, w, bi, 2, 1).unwrap();
            let y = g.gelu(y).unwrap();
            let avg = g.global_avg_pool(y).unwrap();
            let max = g.global_max_pool(y).unwrap();
            let avg = g.reshape(avg, vec![1, 3]).unwrap();
            let max = g.reshape(max, vec![1, 3]).unwrap();
            let logits = g.add(avg, max).unwrap();
            let loss = g.cross_entropy_logits(logits, &[1]).unwrap();
            g.value(loss).item().unwrap()
        };

        let mut g = Graph::new();
        let w = g.param("w", Tensor::from_vec(vec![3, 2, 3, 3], w0.clone()).unwrap());
        let xi = g.input(x.clone());
        let bi = g.input(b0.clone());
        let y = g.conv2d(xi, w, bi, 2, 1).unwrap();
        let y = g.gelu(y).unwrap();
        let avg = g.global_avg_pool(y).unwrap();
        let max = g.global_max_pool(y).unwrap();
        let avg = g.reshape(avg, vec![1, 3]).unwrap();
        let max = g.reshape(max, vec![1, 3]).unwrap();
        let logits = g.add(avg, max).unwrap();
        let loss = g.cross_entropy_logits(logits, &[1]).unwrap();
        let grads = g.backward(loss).unwrap();
        let ad = grads.get("w").unwrap().data().to_vec();

        let mut vals = w0;
        let fd = finite_diff(eval, &mut vals, 1e-2);
        for (i, (&a, &f)) in ad.iter().zip(fd.iter()).enumerate() {
            let denom = a.abs().max(f.abs()).max(1e-2);
            assert!(
                ((a - f) / denom).abs() < 1e-2,
                "w[{i}]: autodiff {a} vs finite-diff {f}"
            );
        }
    }

    #[test]
    fn gather_rows_accumulates_repeated_ids() {
        let mut g = Graph::new();
        let table = g.param("t", Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let gathered = g.gather_rows(table, &[0, 0, 1]).unwrap();
        let loss = g.sum_all(gathered).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("t").unwrap().data(), &[2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let mut rng = Rng::new(99, 0);
        let x = randn(&mut rng, &[4, 4]).unwrap();
        let run = || {
            let mut g = Graph::new();
            let p = g.param("p", x.clone());
            let s = g.softmax_rows(p).unwrap();
            let m = g.matmul(s, p).unwrap();
            let loss = g.mean_all(m).unwrap();
            g.backward(loss).unwrap().get("p").unwrap().clone()
        };
        assert!(run().bits_eq(&run()));
    }
}
