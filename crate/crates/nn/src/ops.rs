//! Forward kernels for the fixed op set.
//!
//! All kernels use a fixed, source-level summation order so results are
//! bit-identical across runs and platforms. Transcendentals go through
//! `libm` rather than platform intrinsics for the same reason.

use crate::error::{NnError, Result};
use crate::tensor::{check_finite, Tensor};

pub const LAYER_NORM_EPS: f32 = 1e-5;

/// Matrix product `a[m,k] x b[k,n]`.
///
/// Accumulation over `k` runs in ascending order for every output element,
/// so the result bit-matches a naive `i,j,p` triple loop.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(NnError::ShapeMismatch {
            op: "matmul",
            detail: format!("{:?} x {:?}", a.shape(), b.shape()),
        });
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    check_finite("matmul", &out)?;
    Tensor::from_vec(vec![m, n], out)
}

/// `a[m,k] x b[n,k]^T -> [m,n]`, via an explicit transpose of `b`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul(a, &transpose(b)?)
}

/// `a[m,k]^T x b[m,n] -> [k,n]`, via an explicit transpose of `a`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul(&transpose(a)?, b)
}

/// 2-D transpose.
pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    let ad = a.data();
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = ad[i * n + j];
        }
    }
    Tensor::from_vec(vec![n, m], out)
}

/// Elementwise sum; shapes must match exactly.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_elementwise("add", a, b, |x, y| x + y)
}

/// Elementwise difference.
pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_elementwise("sub", a, b, |x, y| x - y)
}

/// Elementwise (Hadamard) product.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_elementwise("mul", a, b, |x, y| x * y)
}

fn zip_elementwise(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f32, f32) -> f32,
) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(NnError::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let out: Vec<f32> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| f(x, y)).collect();
    check_finite(op, &out)?;
    Tensor::from_vec(a.shape().to_vec(), out)
}

/// Multiply every element by a constant.
pub fn scale(a: &Tensor, c: f32) -> Result<Tensor> {
    let out: Vec<f32> = a.data().iter().map(|&x| x * c).collect();
    check_finite("scale", &out)?;
    Tensor::from_vec(a.shape().to_vec(), out)
}

/// Add a `[n]` bias vector to every row of `a[m,n]`.
pub fn add_bias(a: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    if bias.shape() != [n] {
        return Err(NnError::ShapeMismatch {
            op: "add_bias",
            detail: format!("matrix {:?}, bias {:?}", a.shape(), bias.shape()),
        });
    }
    let ad = a.data();
    let bd = bias.data();
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = ad[i * n + j] + bd[j];
        }
    }
    check_finite("add_bias", &out)?;
    Tensor::from_vec(vec![m, n], out)
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    let ad = a.data();
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let row = &ad[i * n..(i + 1) * n];
        let orow = &mut out[i * n..(i + 1) * n];
        let max = row.iter().fold(f32::NEG_INFINITY, |acc, &v| acc.max(v));
        let mut denom = 0.0f32;
        for (o, &v) in orow.iter_mut().zip(row.iter()) {
            let e = libm::expf(v - max);
            *o = e;
            denom += e;
        }
        for o in orow.iter_mut() {
            *o /= denom;
        }
    }
    check_finite("softmax_rows", &out)?;
    Tensor::from_vec(vec![m, n], out)
}

/// Normalize each length-`d` vector to zero mean / unit variance
/// (`eps = 1e-5` inside the square root), then apply `gain` and `bias`.
///
/// Works on any shape whose last dimension is `d`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = *x.shape().last().ok_or_else(|| NnError::ShapeMismatch {
        op: "layer_norm",
        detail: "rank-0 input".into(),
    })?;
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(NnError::ShapeMismatch {
            op: "layer_norm",
            detail: format!("input {:?}, gain {:?}, bias {:?}", x.shape(), gain.shape(), bias.shape()),
        });
    }
    let xd = x.data();
    let gd = gain.data();
    let bd = bias.data();
    let rows = x.numel() / d;
    let mut out = vec![0.0f32; x.numel()];
    for r in 0..rows {
        let row = &xd[r * d..(r + 1) * d];
        let orow = &mut out[r * d..(r + 1) * d];
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
        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for ((o, &v), (&g, &b)) in orow.iter_mut().zip(row.iter()).zip(gd.iter().zip(bd.iter())) {
            *o = (v - mean) * inv_std * g + b;
        }
    }
    check_finite("layer_norm", &out)?;
    Tensor::from_vec(x.shape().to_vec(), out)
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

pub(crate) fn gelu_scalar(x: f32) -> f32 {
    0.5 * x * (1.0 + libm::tanhf(GELU_C * (x + GELU_A * x * x * x)))
}

pub(crate) fn gelu_grad_scalar(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = libm::tanhf(u);
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Tanh-approximation GELU.
pub fn gelu(a: &Tensor) -> Result<Tensor> {
    let out: Vec<f32> = a.data().iter().map(|&x| gelu_scalar(x)).collect();
    check_finite("gelu", &out)?;
    Tensor::from_vec(a.shape().to_vec(), out)
}

/// Contiguous 2-D slice along `axis` (0 = rows, 1 = cols), `start..end`.
pub fn slice2(a: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    let limit = if axis == 0 { m } else { n };
    if axis > 1 || start >= end || end > limit {
        return Err(NnError::IndexOutOfRange {
            op: "slice2",
            detail: format!("axis {axis} range {start}..{end} on shape {:?}", a.shape()),
        });
    }
    let ad = a.data();
    let out = if axis == 0 {
        ad[start * n..end * n].to_vec()
    } else {
        let mut v = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            v.extend_from_slice(&ad[i * n + start..i * n + end]);
        }
        v
    };
    let shape = if axis == 0 { vec![end - start, n] } else { vec![m, end - start] };
    Tensor::from_vec(shape, out)
}

/// Row lookup: `table[v,d]` gathered at `ids` -> `[ids.len(), d]`.
pub fn gather_rows(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let (v, d) = table.dims2()?;
    let td = table.data();
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= v {
            return Err(NnError::IndexOutOfRange {
                op: "gather_rows",
                detail: format!("row {id} of {v}"),
            });
        }
        out.extend_from_slice(&td[id * d..(id + 1) * d]);
    }
    Tensor::from_vec(vec![ids.len(), d], out)
}

/// Mean of all elements, as a `[1]` tensor.
pub fn mean_all(a: &Tensor) -> Result<Tensor> {
    let s = sum_slice(a.data());
    Tensor::scalar(s / a.numel() as f32)
}

/// Sum of all elements, as a `[1]` tensor.
pub fn sum_all(a: &Tensor) -> Result<Tensor> {
    Tensor::scalar(sum_slice(a.data()))
}

pub(crate) fn sum_slice(data: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for &v in data {
        acc += v;
    }
    acc
}

/// Mean squared error between same-shaped tensors, as a `[1]` tensor.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(NnError::ShapeMismatch {
            op: "mse",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let mut acc = 0.0f32;
    for (&x, &y) in a.data().iter().zip(b.data().iter()) {
        let d = x - y;
        acc += d * d;
    }
    let out = acc / a.numel() as f32;
    if !out.is_finite() {
        return Err(NnError::NonFinite { op: "mse", index: 0 });
    }
    Tensor::scalar(out)
}

/// Zero-padded 2-D convolution: `x[c_in,h,w] * w[c_out,c_in,kh,kw] + b[c_out]`.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (c_in, h, wd) = x.dims3()?;
    let ws = w.shape();
    if ws.len() != 4 || ws[1] != c_in {
        return Err(NnError::ShapeMismatch {
            op: "conv2d",
            detail: format!("input {:?}, weight {:?}", x.shape(), ws),
        });
    }
    let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
    if b.shape() != [c_out] {
        return Err(NnError::ShapeMismatch {
            op: "conv2d",
            detail: format!("bias {:?} for {c_out} channels", b.shape()),
        });
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let xd = x.data();
    let wv = w.data();
    let bd = b.data();
    let mut out = vec![0.0f32; c_out * oh * ow];
    for oc in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bd[oc];
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
                            acc += xd[(ic * h + iy as usize) * wd + ix as usize]
                                * wv[((oc * c_in + ic) * kh + ky) * kw + kx];
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    check_finite("conv2d", &out)?;
    Tensor::from_vec(vec![c_out, oh, ow], out)
}

/// Spatial mean per channel: `[c,h,w] -> [c]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let xd = x.data();
    let hw = h * w;
    let mut out = vec![0.0f32; c];
    for ch in 0..c {
        out[ch] = sum_slice(&xd[ch * hw..(ch + 1) * hw]) / hw as f32;
    }
    Tensor::from_vec(vec![c], out)
}

/// Spatial max per channel: `[c,h,w] -> [c]`. Ties resolve to the first
/// (row-major) position, which keeps the gradient routing deterministic.
pub fn global_max_pool(x: &Tensor) -> Result<Tensor> {
    Ok(global_max_pool_with_argmax(x)?.0)
}

pub(crate) fn global_max_pool_with_argmax(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = x.dims3()?;
    let xd = x.data();
    let hw = h * w;
    let mut out = vec![0.0f32; c];
    let mut arg = vec![0usize; c];
    for ch in 0..c {
        let plane = &xd[ch * hw..(ch + 1) * hw];
        let mut best = 0usize;
        for (i, &v) in plane.iter().enumerate() {
            if v > plane[best] {
                best = i;
            }
        }
        out[ch] = plane[best];
        arg[ch] = best;
    }
    Ok((Tensor::from_vec(vec![c], out)?, arg))
}

/// Mean cross-entropy of `logits[n,k]` rows against integer `targets`.
///
/// Computed as `logsumexp(row) - row[target]` with max subtraction.
pub fn cross_entropy_logits(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let (n, k) = logits.dims2()?;
    if targets.len() != n {
        return Err(NnError::ShapeMismatch {
            op: "cross_entropy_logits",
            detail: format!("{n} rows, {} targets", targets.len()),
        });
    }
    let ld = logits.data();
    let mut acc = 0.0f32;
    for (r, &t) in targets.iter().enumerate() {
        if t >= k {
            return Err(NnError::IndexOutOfRange {
                op: "cross_entropy_logits",
                detail: format!("target {t} of {k} classes"),
            });
        }
        let row = &ld[r * k..(r + 1) * k];
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &v| a.max(v));
        let mut denom = 0.0f32;
        for &v in row {
            denom += libm::expf(v - max);
        }
        acc += max + libm::logf(denom) - row[t];
    }
    let out = acc / n as f32;
    if !out.is_finite() {
        return Err(NnError::NonFinite { op: "cross_entropy_logits", index: 0 });
    }
    Tensor::scalar(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, v: Vec<f32>) -> Tensor {
        Tensor::from_vec(vec![rows, cols], v).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let i = t2(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let a = t2(2, 2, vec![5.0, 6.0, 7.0, 8.0]);
        assert!(matmul(&i, &a).unwrap().bits_eq(&a));
        assert!(matmul(&a, &i).unwrap().bits_eq(&a));
    }

    #[test]
    fn matmul_dot() {
        let a = t2(1, 2, vec![1.0, 2.0]);
        let b = t2(2, 1, vec![3.0, 4.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    /// Naive i,j,p oracle; accumulation order per element matches the kernel
    /// contract, so equality must be exact to the bit.
    fn matmul_naive(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f32;
                for p in 0..k {
                    acc += a.data()[i * k + p] * b.data()[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        Tensor::from_vec(vec![m, n], out).unwrap()
    }

    #[test]
    fn matmul_bit_matches_naive_oracle() {
        let mut rng = crate::rng::Rng::new(11, 0);
        let a = crate::rng::randn(&mut rng, &[7, 5]).unwrap();
        let b = crate::rng::randn(&mut rng, &[5, 3]).unwrap();
        let got = matmul(&a, &b).unwrap();
        assert!(got.bits_eq(&matmul_naive(&a, &b)));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = t2(2, 3, vec![0.0; 6]);
        let b = t2(2, 2, vec![0.0; 4]);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn transpose_round_trip() {
        let a = t2(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let tt = transpose(&transpose(&a).unwrap()).unwrap();
        assert!(tt.bits_eq(&a));
    }

    #[test]
    fn softmax_uniform_on_equal_inputs() {
        let s = softmax_rows(&t2(1, 3, vec![0.0, 0.0, 0.0])).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        // max subtraction keeps huge inputs stable
        let s = softmax_rows(&t2(1, 2, vec![1000.0, 1000.0])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_matches_f64_oracle() {
        let x = t2(1, 3, vec![1.0, 2.0, 3.0]);
        let s = softmax_rows(&x).unwrap();
        let exps: Vec<f64> = x.data().iter().map(|&v| ((v - 3.0) as f64).exp()).collect();
        let denom: f64 = exps.iter().sum();
        for (got, want) in s.data().iter().zip(exps.iter().map(|e| e / denom)) {
            assert!((*got as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_at_extremes() {
        let x = t2(2, 4, vec![500.0, -500.0, 250.0, 0.0, -500.0, -500.0, -500.0, -500.0]);
        let s = softmax_rows(&x).unwrap();
        for r in 0..2 {
            let sum: f32 = s.data()[r * 4..(r + 1) * 4].iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_bias() {
        let x = t2(1, 4, vec![3.0; 4]);
        let gain = Tensor::full(vec![4], 1.0).unwrap();
        let bias = Tensor::zeros(vec![4]);
        let y = layer_norm(&x, &gain, &bias).unwrap();
        for &v in y.data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_two_point_row() {
        let x = t2(1, 2, vec![1.0, -1.0]);
        let gain = Tensor::full(vec![2], 1.0).unwrap();
        let bias = Tensor::zeros(vec![2]);
        let y = layer_norm(&x, &gain, &bias).unwrap();
        let want = 1.0 / (1.0f32 + LAYER_NORM_EPS).sqrt();
        assert!((y.data()[0] - want).abs() < 1e-7);
        assert!((y.data()[1] + want).abs() < 1e-7);
    }

    #[test]
    fn layer_norm_matches_f64_oracle() {
        let mut rng = crate::rng::Rng::new(3, 7);
        let x = crate::rng::randn(&mut rng, &[1, 16]).unwrap();
        let gain = crate::rng::randn(&mut rng, &[16]).unwrap();
        let bias = crate::rng::randn(&mut rng, &[16]).unwrap();
        let y = layer_norm(&x, &gain, &bias).unwrap();

        let xd: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let mean = xd.iter().sum::<f64>() / 16.0;
        let var = xd.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
        let inv = 1.0 / (var + LAYER_NORM_EPS as f64).sqrt();
        for j in 0..16 {
            let want = (xd[j] - mean) * inv * gain.data()[j] as f64 + bias.data()[j] as f64;
            assert!((y.data()[j] as f64 - want).abs() < 1e-5);
        }
    }

    #[test]
    fn slice2_rows_and_cols() {
        let a = t2(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(slice2(&a, 0, 1, 3).unwrap().data(), &[3.0, 4.0, 5.0, 6.0]);
        assert_eq!(slice2(&a, 1, 1, 2).unwrap().data(), &[2.0, 4.0, 6.0]);
        assert!(slice2(&a, 0, 2, 4).is_err());
    }

    #[test]
    fn gather_rows_lookup() {
        let table = t2(3, 2, vec![0.0, 1.0, 10.0, 11.0, 20.0, 21.0]);
        let g = gather_rows(&table, &[2, 0, 2]).unwrap();
        assert_eq!(g.data(), &[20.0, 21.0, 0.0, 1.0, 20.0, 21.0]);
        assert!(gather_rows(&table, &[3]).is_err());
    }

    #[test]
    fn conv2d_identity_kernel() {
        let x = Tensor::from_vec(vec![1, 3, 3], (1..=9).map(|i| i as f32).collect()).unwrap();
        let w = Tensor::from_vec(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::zeros(vec![1]);
        let y = conv2d(&x, &w, &b, 1, 0).unwrap();
        assert!(y.bits_eq(&x));
    }

    #[test]
    fn conv2d_stride_and_pad_shapes() {
        let x = Tensor::zeros(vec![3, 8, 8]);
        let w = Tensor::zeros(vec![5, 3, 3, 3]);
        let b = Tensor::zeros(vec![5]);
        let y = conv2d(&x, &w, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), &[5, 4, 4]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = t2(1, 4, vec![0.0; 4]);
        let loss = cross_entropy_logits(&logits, &[2]).unwrap().item().unwrap();
        assert!((loss - (4.0f32).ln()).abs() < 1e-6);
    }

    #[test]
    fn mse_quadratic() {
        let a = t2(1, 1, vec![2.0]);
        let b = t2(1, 1, vec![0.0]);
        assert_eq!(mse(&a, &b).unwrap().item().unwrap(), 4.0);
    }
}
