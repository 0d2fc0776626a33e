//! Lesion-region estimation for generated images.
//!
//! Ground-truth masks exist only for rendered scenes. Generated images get
//! a rule-based estimate instead, exploiting the fixed concept palettes:
//! lesions are dark warm-red, dye is strongly blue-shifted, and no
//! background style reaches either region of color space. This plays the
//! role a segmentation network plays on real data, and is only used where
//! no ground truth exists.

use steerlab_nn::Tensor;

use crate::error::Result;

const RED_GAP_MIN: f32 = 0.24;
const GREEN_MAX: f32 = 0.30;
const BLUE_GAP_MIN: f32 = 0.28;

/// Estimate the lesion mask (including any dyed region) of an image.
/// Returns a binary `[h, w]` mask, dilated by one pixel to cover soft edges.
pub fn estimate_lesion_mask(image: &Tensor) -> Result<Tensor> {
    let (_, h, w) = image.dims3()?;
    let d = image.data();
    let mut raw = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let r = d[y * w + x];
            let g = d[(h + y) * w + x];
            let b = d[(2 * h + y) * w + x];
            let lesionish = r - g > RED_GAP_MIN && g < GREEN_MAX;
            let dyeish = b - r > BLUE_GAP_MIN;
            if lesionish || dyeish {
                raw[y * w + x] = 1.0;
            }
        }
    }
    let mut dilated = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            'scan: for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let (ny, nx) = (y as i32 + dy, x as i32 + dx);
                    if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w
                        && raw[ny as usize * w + nx as usize] == 1.0
                    {
                        dilated[y * w + x] = 1.0;
                        break 'scan;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(vec![h, w], dilated)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{render_scene, SceneSpec, STYLE_COUNT};

    #[test]
    fn plain_backgrounds_trigger_nothing() {
        for style in 0..STYLE_COUNT {
            for seed in 0..20u64 {
                let scene = render_scene(&SceneSpec {
                    seed,
                    has_lesion: false,
                    has_dye: false,
                    background_style: style,
                    image_size: 32,
                })
                .unwrap();
                let est = estimate_lesion_mask(&scene.image).unwrap();
                let area: f32 = est.data().iter().sum();
                assert_eq!(area, 0.0, "style {style} seed {seed} false positives");
            }
        }
    }

    #[test]
    fn estimates_cover_most_of_the_true_lesion() {
        let mut covered = 0.0f32;
        let mut total = 0.0f32;
        let mut leaked = 0.0f32;
        for seed in 0..60u64 {
            for dye in [false, true] {
                let scene = render_scene(&SceneSpec {
                    seed,
                    has_lesion: true,
                    has_dye: dye,
                    background_style: (seed % 3) as u32,
                    image_size: 32,
                })
                .unwrap();
                let est = estimate_lesion_mask(&scene.image).unwrap();
                for (e, t) in est.data().iter().zip(scene.lesion_mask.data().iter()) {
                    if *t == 1.0 {
                        total += 1.0;
                        if *e == 1.0 {
                            covered += 1.0;
                        }
                    } else if *e == 1.0 {
                        leaked += 1.0;
                    }
                }
            }
        }
        let recall = covered / total;
        assert!(recall > 0.55, "recall {recall}");
        // dilation leaks a thin ring at most
        assert!(leaked < total, "leak {leaked} vs lesion {total}");
    }
}
