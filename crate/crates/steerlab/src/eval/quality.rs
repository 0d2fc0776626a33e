//! Background-restricted fidelity metrics.

use steerlab_nn::Tensor;

use crate::error::{LabError, Result};

const SSIM_WINDOW: usize = 7;
const SSIM_C1: f32 = 0.01 * 0.01;
const SSIM_C2: f32 = 0.03 * 0.03;
const PSNR_CAP_DB: f32 = 99.0;

/// SSIM between two `[3, h, w]` images over a pixel mask.
///
/// Uniform 7x7 windows; only fully-inside windows whose center pixel lies in
/// the mask are aggregated. Computed per channel, then averaged.
pub fn masked_ssim(a: &Tensor, b: &Tensor, mask: &Tensor) -> Result<f32> {
    let (c, h, w) = check_pair(a, b, mask)?;
    let half = SSIM_WINDOW / 2;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(LabError::Invalid(format!("image {h}x{w} smaller than SSIM window")));
    }
    let md = mask.data();
    let mut channel_sum = 0.0f32;
    let mut windows = 0usize;
    for ch in 0..c {
        let pa = &a.data()[ch * h * w..(ch + 1) * h * w];
        let pb = &b.data()[ch * h * w..(ch + 1) * h * w];
        let mut acc = 0.0f32;
        let mut n = 0usize;
        for cy in half..h - half {
            for cx in half..w - half {
                if md[cy * w + cx] == 0.0 {
                    continue;
                }
                acc += window_ssim(pa, pb, w, cy - half, cx - half);
                n += 1;
            }
        }
        if n == 0 {
            return Err(LabError::Invalid(
                "mask admits no valid SSIM windows (empty or border-only)".into(),
            ));
        }
        channel_sum += acc / n as f32;
        windows = n;
    }
    let _ = windows;
    Ok(channel_sum / c as f32)
}

fn window_ssim(pa: &[f32], pb: &[f32], w: usize, y0: usize, x0: usize) -> f32 {
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f32;
    let mut ma = 0.0f32;
    let mut mb = 0.0f32;
    for y in y0..y0 + SSIM_WINDOW {
        for x in x0..x0 + SSIM_WINDOW {
            ma += pa[y * w + x];
            mb += pb[y * w + x];
        }
    }
    ma /= n;
    mb /= n;
    let mut va = 0.0f32;
    let mut vb = 0.0f32;
    let mut cov = 0.0f32;
    for y in y0..y0 + SSIM_WINDOW {
        for x in x0..x0 + SSIM_WINDOW {
            let da = pa[y * w + x] - ma;
            let db = pb[y * w + x] - mb;
            va += da * da;
            vb += db * db;
            cov += da * db;
        }
    }
    va /= n;
    vb /= n;
    cov /= n;
    ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
        / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
}

/// PSNR (dB, unit data range) over masked pixels of all channels, capped at
/// 99 dB when the masked MSE falls below `1e-10`.
pub fn masked_psnr(a: &Tensor, b: &Tensor, mask: &Tensor) -> Result<f32> {
    let (c, h, w) = check_pair(a, b, mask)?;
    let md = mask.data();
    let mut acc = 0.0f32;
    let mut n = 0usize;
    for ch in 0..c {
        let pa = &a.data()[ch * h * w..(ch + 1) * h * w];
        let pb = &b.data()[ch * h * w..(ch + 1) * h * w];
        for i in 0..h * w {
            if md[i] == 0.0 {
                continue;
            }
            let d = pa[i] - pb[i];
            acc += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(LabError::Invalid("empty mask".into()));
    }
    let mse = acc / n as f32;
    if mse < 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * libm::log10f(1.0 / mse))
}

fn check_pair(a: &Tensor, b: &Tensor, mask: &Tensor) -> Result<(usize, usize, usize)> {
    let (c, h, w) = a.dims3()?;
    if a.shape() != b.shape() {
        return Err(LabError::Invalid(format!(
            "image shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if mask.shape() != [h, w] {
        return Err(LabError::Invalid(format!(
            "mask {:?} does not match image {:?}",
            mask.shape(),
            a.shape()
        )));
    }
    if mask.data().iter().all(|&v| v == 0.0) {
        return Err(LabError::Invalid("empty mask".into()));
    }
    Ok((c, h, w))
}

/// Complement of a binary mask.
pub fn invert_mask(mask: &Tensor) -> Result<Tensor> {
    let inv: Vec<f32> = mask.data().iter().map(|&v| if v == 0.0 { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::from_vec(mask.shape().to_vec(), inv)?)
}
