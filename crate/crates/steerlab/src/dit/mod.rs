//! Miniature diffusion transformer with cross-attention conditioning.
//!
//! Architecture per layer (pre-norm): `x += SA(LN(x))`, then
//! `x += intercept(CA(LN(x), prompt))`, then `x += FF(LN(x))`. The prompt
//! reaches image tokens only through cross-attention; the CA output (after
//! its output projection, before the residual add) is the one hookable site
//! per `(layer, step)`.
//!
//! Diffusion runs in a zero-centered value space: images in `[0, 1]` map to
//! `2x - 1` before noising and back (with clamping) after sampling.

mod forward;
mod params;
mod sample;
mod schedule;
mod train;

pub use forward::{forward_denoiser, patchify, unpatchify, CaInterceptor, HookRun};
pub use params::{CheckpointManifest, ModelParams};
pub use sample::{ddim_sample, ddim_sample_from_noise, ddim_update, SampleRun};
pub use schedule::DiffusionSchedule;
pub use train::{train, AdamState, TrainResult, TrainSettings};

use serde::{Deserialize, Serialize};
use steerlab_nn::Tensor;

use crate::error::{LabError, Result};

/// Model dimensions; the defaults are the ones every experiment here uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d: usize,
    pub heads: usize,
    pub patch: usize,
    pub d_text: usize,
    pub image_size: usize,
    pub t_train: usize,
    pub t_sample: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 8,
            d: 64,
            heads: 4,
            patch: 4,
            d_text: 32,
            image_size: 32,
            t_train: 200,
            t_sample: 20,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(LabError::Config(format!(
                "token dim {} must be divisible by heads {}",
                self.d, self.heads
            )));
        }
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(LabError::Config(format!(
                "image size {} must be divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        if self.n_layers == 0 || self.d_text == 0 {
            return Err(LabError::Config("layers and text dim must be positive".into()));
        }
        if self.t_sample == 0 || self.t_sample > self.t_train {
            return Err(LabError::Config(format!(
                "t_sample {} must be in [1, t_train {}]",
                self.t_sample, self.t_train
            )));
        }
        Ok(())
    }

    /// Patches per side of the token grid.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Flattened patch length (3 channels).
    pub fn patch_dim(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Feed-forward hidden width.
    pub fn ff_dim(&self) -> usize {
        2 * self.d
    }
}

/// Address of one hookable cross-attention output.
///
/// `step` is the sampler step index, 1-based with step 1 the noisiest;
/// the pathology-vector bank is indexed the same way.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HookSite {
    pub layer: usize,
    pub step: usize,
}

/// Map an image in `[0, 1]` into the zero-centered diffusion value space.
pub fn to_diffusion_space(image: &Tensor) -> Result<Tensor> {
    let data: Vec<f32> = image.data().iter().map(|&v| 2.0 * v - 1.0).collect();
    Ok(Tensor::from_vec(image.shape().to_vec(), data)?)
}

/// Map a diffusion-space value back to a `[0, 1]` image, clamping.
pub fn from_diffusion_space(x: &Tensor) -> Result<Tensor> {
    let data: Vec<f32> = x.data().iter().map(|&v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)).collect();
    Ok(Tensor::from_vec(x.shape().to_vec(), data)?)
}
