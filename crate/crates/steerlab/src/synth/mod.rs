//! Procedural concept scenes with ground-truth masks.
//!
//! Rendering is a pure function of [`SceneSpec`]: the background depends only
//! on `(seed, background_style)`, the lesion blob only on `seed`, and the dye
//! tint only on `seed` — so toggling concept flags never perturbs pixels
//! outside the lesion mask, and every metric restricted to the background is
//! exactly interpretable.

mod dataset;
mod prompt;

pub use dataset::{make_dataset, SceneRecord, Split};
pub use prompt::{
    contrastive_pair, encode_prompt, PromptSpec, CONCEPT_SLOT, CTX_TOKENS, PROMPT_LEN, TOKEN_CONCEPT_DYED,
    TOKEN_CONCEPT_LESION, TOKEN_CONCEPT_NORMAL, TOKEN_PAD, TOKEN_SITE_ALT, TOKEN_SITE_BASE,
    VOCAB_SIZE,
};

use serde::{Deserialize, Serialize};
use steerlab_nn::{Rng, Tensor};

use crate::error::{LabError, Result};

/// Number of background styles; the lower half is the "base site" group,
/// the upper half the "alt site" group.
pub const STYLE_COUNT: u32 = 8;
/// Styles available to train/val scenes, per group; the last style of each
/// group is reserved for the test split so test backgrounds are unseen.
pub const SEEN_STYLES_PER_GROUP: u32 = 3;

/// Lesion area bounds as a fraction of the image, enforced by construction.
pub const LESION_AREA_MIN_FRAC: f32 = 0.02;
pub const LESION_AREA_MAX_FRAC: f32 = 0.20;

const BG_PALETTE: [[f32; 3]; STYLE_COUNT as usize] = [
    // base-site group: warm mucosa-like tints
    [0.85, 0.62, 0.55],
    [0.80, 0.68, 0.52],
    [0.88, 0.58, 0.62],
    [0.82, 0.65, 0.58], // test-only
    // alt-site group: cool tints
    [0.55, 0.72, 0.82],
    [0.50, 0.78, 0.70],
    [0.60, 0.68, 0.85],
    [0.52, 0.75, 0.78], // test-only
];

const LESION_TINT: [f32; 3] = [0.55, 0.20, 0.18];
const DYE_TINT: [f32; 3] = [0.15, 0.25, 0.80];
const DYE_STRENGTH: f32 = 0.85;
/// Soft-edge width as a fraction of the normalized ellipse radius.
const EDGE_WIDTH: f32 = 0.35;

/// Everything needed to render one scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub has_lesion: bool,
    pub has_dye: bool,
    pub background_style: u32,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
}

fn default_image_size() -> usize {
    32
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.has_dye && !self.has_lesion {
            return Err(LabError::Invalid("dye requires a lesion to sit on".into()));
        }
        if self.background_style >= STYLE_COUNT {
            return Err(LabError::Invalid(format!(
                "background_style {} out of [0, {STYLE_COUNT})",
                self.background_style
            )));
        }
        if self.image_size < 8 {
            return Err(LabError::Invalid(format!("image_size {} too small", self.image_size)));
        }
        Ok(())
    }

    pub fn is_alt_site(&self) -> bool {
        self.background_style >= STYLE_COUNT / 2
    }

    pub fn class(&self) -> SceneClass {
        if self.is_alt_site() {
            SceneClass::AltBackground
        } else if self.has_dye {
            SceneClass::DyedLesion
        } else if self.has_lesion {
            SceneClass::Lesion
        } else {
            SceneClass::Plain
        }
    }
}

/// The four concept combinations the corpus is balanced over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SceneClass {
    Plain,
    Lesion,
    DyedLesion,
    AltBackground,
}

impl SceneClass {
    pub const ALL: [SceneClass; 4] =
        [SceneClass::Plain, SceneClass::Lesion, SceneClass::DyedLesion, SceneClass::AltBackground];

    pub fn index(self) -> usize {
        match self {
            SceneClass::Plain => 0,
            SceneClass::Lesion => 1,
            SceneClass::DyedLesion => 2,
            SceneClass::AltBackground => 3,
        }
    }

    pub fn has_lesion(self) -> bool {
        matches!(self, SceneClass::Lesion | SceneClass::DyedLesion)
    }
}

/// A rendered scene: image plus ground-truth concept masks.
#[derive(Debug, Clone)]
pub struct Scene {
    pub image: Tensor,
    pub lesion_mask: Tensor,
    pub dye_mask: Tensor,
    pub spec: SceneSpec,
}

struct Ellipse {
    cx: f32,
    cy: f32,
    rx: f32,
    ry: f32,
}

impl Ellipse {
    /// Normalized radius of a pixel center (1.0 = on the boundary).
    fn radius(&self, x: usize, y: usize) -> f32 {
        let dx = (x as f32 + 0.5 - self.cx) / self.rx;
        let dy = (y as f32 + 0.5 - self.cy) / self.ry;
        (dx * dx + dy * dy).sqrt()
    }
}

fn smoothstep(t: f32) -> f32 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Soft blend weight for a normalized radius; 0 exactly outside the ellipse.
fn blob_weight(r: f32) -> f32 {
    if r >= 1.0 {
        0.0
    } else {
        smoothstep((1.0 - r) / EDGE_WIDTH)
    }
}

/// Low-frequency value noise in `[0, 1]`: two smoothstep-interpolated
/// lattice octaves.
fn value_noise(rng: &mut Rng, size: usize) -> Vec<f32> {
    let octave = |rng: &mut Rng, grid: usize, size: usize| -> Vec<f32> {
        let lattice: Vec<f32> =
            (0..(grid + 1) * (grid + 1)).map(|_| rng.uniform_f64() as f32).collect();
        let mut out = vec![0.0f32; size * size];
        for y in 0..size {
            for x in 0..size {
                let u = x as f32 / size as f32 * grid as f32;
                let v = y as f32 / size as f32 * grid as f32;
                let (i, j) = (u as usize, v as usize);
                let (fu, fv) = (smoothstep(u - i as f32), smoothstep(v - j as f32));
                let row = grid + 1;
                let a = lattice[j * row + i];
                let b = lattice[j * row + i + 1];
                let c = lattice[(j + 1) * row + i];
                let d = lattice[(j + 1) * row + i + 1];
                out[y * size + x] =
                    a * (1.0 - fu) * (1.0 - fv) + b * fu * (1.0 - fv) + c * (1.0 - fu) * fv + d * fu * fv;
            }
        }
        out
    };
    let o1 = octave(rng, 4, size);
    let o2 = octave(rng, 8, size);
    o1.iter().zip(o2.iter()).map(|(&a, &b)| (2.0 * a + b) / 3.0).collect()
}

fn sample_lesion_ellipse(rng: &mut Rng, size: usize) -> Ellipse {
    let scale = size as f32 / 32.0;
    let area = size as f32 * size as f32;
    // product bounds keep pi*rx*ry inside the configured area fractions,
    // with margin for discretization
    let prod_lo = (LESION_AREA_MIN_FRAC * area / std::f32::consts::PI) * 1.02;
    let prod_hi = (LESION_AREA_MAX_FRAC * area / std::f32::consts::PI) * 0.97;
    let r_lo = 2.6 * scale;
    let r_hi = 7.8 * scale;
    let rx = r_lo + rng.uniform_f64() as f32 * (r_hi - r_lo);
    let ry_lo = (prod_lo / rx).max(r_lo);
    let ry_hi = (prod_hi / rx).min(r_hi);
    let ry = ry_lo + rng.uniform_f64() as f32 * (ry_hi - ry_lo).max(0.0);
    let margin_x = rx + 1.0;
    let margin_y = ry + 1.0;
    let cx = margin_x + rng.uniform_f64() as f32 * (size as f32 - 2.0 * margin_x);
    let cy = margin_y + rng.uniform_f64() as f32 * (size as f32 - 2.0 * margin_y);
    Ellipse { cx, cy, rx, ry }
}

/// Render a scene from its spec. Same spec, same bits.
pub fn render_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let size = spec.image_size;
    let tint = BG_PALETTE[spec.background_style as usize];

    let mut bg_rng = Rng::new(spec.seed, 0).derive("background", spec.background_style as u64);
    let noise = value_noise(&mut bg_rng, size);

    let mut image = vec![0.0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let shade = 0.55 + 0.40 * noise[y * size + x];
            for ch in 0..3 {
                image[(ch * size + y) * size + x] = (tint[ch] * shade).clamp(0.0, 1.0);
            }
        }
    }

    let mut lesion_mask = vec![0.0f32; size * size];
    let mut dye_mask = vec![0.0f32; size * size];

    if spec.has_lesion {
        let mut lesion_rng = Rng::new(spec.seed, 0).derive("lesion", 0);
        let ellipse = sample_lesion_ellipse(&mut lesion_rng, size);
        // dye sits on a concentric sub-ellipse, so containment is structural
        let dye_scale = if spec.has_dye {
            let mut dye_rng = Rng::new(spec.seed, 0).derive("dye", 0);
            Some(0.45 + dye_rng.uniform_f64() as f32 * 0.25)
        } else {
            None
        };
        for y in 0..size {
            for x in 0..size {
                let r = ellipse.radius(x, y);
                if r >= 1.0 {
                    continue;
                }
                lesion_mask[y * size + x] = 1.0;
                let w = blob_weight(r);
                if w > 0.0 {
                    let shade = 0.80 + 0.30 * (1.0 - r);
                    for ch in 0..3 {
                        let idx = (ch * size + y) * size + x;
                        let lesion_col = (LESION_TINT[ch] * shade).clamp(0.0, 1.0);
                        image[idx] = image[idx] * (1.0 - w) + lesion_col * w;
                    }
                }
                if let Some(s) = dye_scale {
                    let rd = r / s;
                    if rd < 1.0 {
                        dye_mask[y * size + x] = 1.0;
                        let wd = blob_weight(rd) * DYE_STRENGTH;
                        if wd > 0.0 {
                            for ch in 0..3 {
                                let idx = (ch * size + y) * size + x;
                                image[idx] = image[idx] * (1.0 - wd) + DYE_TINT[ch] * wd;
                            }
                        }
                    }
                }
            }
        }
    }

    Ok(Scene {
        image: Tensor::from_vec(vec![3, size, size], image)?,
        lesion_mask: Tensor::from_vec(vec![size, size], lesion_mask)?,
        dye_mask: Tensor::from_vec(vec![size, size], dye_mask)?,
        spec: *spec,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64, lesion: bool, dye: bool, style: u32) -> SceneSpec {
        SceneSpec { seed, has_lesion: lesion, has_dye: dye, background_style: style, image_size: 32 }
    }

    #[test]
    fn no_lesion_means_empty_masks() {
        let s = render_scene(&spec(1, false, false, 0)).unwrap();
        assert!(s.lesion_mask.data().iter().all(|&v| v == 0.0));
        assert!(s.dye_mask.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rendering_is_pure() {
        let sp = spec(99, true, true, 2);
        let a = render_scene(&sp).unwrap();
        let b = render_scene(&sp).unwrap();
        assert!(a.image.bits_eq(&b.image));
        assert!(a.lesion_mask.bits_eq(&b.lesion_mask));
        assert!(a.dye_mask.bits_eq(&b.dye_mask));
    }

    #[test]
    fn dye_requires_lesion() {
        assert!(render_scene(&spec(1, false, true, 0)).is_err());
    }

    #[test]
    fn background_invariant_across_concept_flags() {
        // pixels outside the lesion mask must be bit-identical across all
        // concept-flag combinations of one (seed, style)
        for seed in [3u64, 17, 202] {
            let plain = render_scene(&spec(seed, false, false, 1)).unwrap();
            let lesion = render_scene(&spec(seed, true, false, 1)).unwrap();
            let dyed = render_scene(&spec(seed, true, true, 1)).unwrap();
            let size = 32;
            for y in 0..size {
                for x in 0..size {
                    if lesion.lesion_mask.data()[y * size + x] != 0.0 {
                        continue;
                    }
                    for ch in 0..3 {
                        let idx = (ch * size + y) * size + x;
                        assert_eq!(
                            plain.image.data()[idx].to_bits(),
                            lesion.image.data()[idx].to_bits()
                        );
                        assert_eq!(
                            plain.image.data()[idx].to_bits(),
                            dyed.image.data()[idx].to_bits()
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn image_differs_from_plain_only_inside_lesion_mask() {
        let seed = 41;
        let plain = render_scene(&spec(seed, false, false, 0)).unwrap();
        let lesion = render_scene(&spec(seed, true, false, 0)).unwrap();
        let size = 32;
        for y in 0..size {
            for x in 0..size {
                let differs = (0..3).any(|ch| {
                    let idx = (ch * size + y) * size + x;
                    plain.image.data()[idx].to_bits() != lesion.image.data()[idx].to_bits()
                });
                if differs {
                    assert_eq!(lesion.lesion_mask.data()[y * size + x], 1.0);
                }
            }
        }
    }

    #[test]
    fn dye_mask_contained_in_lesion_mask() {
        for seed in 0..50u64 {
            let s = render_scene(&spec(seed, true, true, 0)).unwrap();
            for (d, l) in s.dye_mask.data().iter().zip(s.lesion_mask.data().iter()) {
                assert!(*d == 0.0 || *l == 1.0);
            }
        }
    }

    #[test]
    fn lesion_area_fraction_within_configured_bounds() {
        for seed in 0..1000u64 {
            let s = render_scene(&spec(seed, true, false, 0)).unwrap();
            let area: f32 = s.lesion_mask.data().iter().sum();
            let frac = area / (32.0 * 32.0);
            assert!(
                (LESION_AREA_MIN_FRAC..=LESION_AREA_MAX_FRAC).contains(&frac),
                "seed {seed}: lesion fraction {frac}"
            );
        }
    }
}
