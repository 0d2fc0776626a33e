//! Evaluation report serialization.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};

/// One evaluation's numbers. Fields not produced by a given suite stay
/// `null`; `n` is the sample count behind every populated field.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub flip_rate: Option<f32>,
    pub delta_p: Option<f32>,
    pub bg_ssim: Option<f32>,
    pub bg_psnr: Option<f32>,
    pub bg_featdist: Option<f32>,
    pub ddr: Option<f32>,
    pub eff_lpips_proxy: Option<f32>,
    pub eff_ssim: Option<f32>,
    pub eff_psnr: Option<f32>,
    pub auc: Option<f32>,
    pub n: usize,
    pub config_fingerprint: String,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |name: &str, v: Option<f32>| -> Result<()> {
            if let Some(x) = v {
                if !(0.0..=1.0).contains(&x) {
                    return Err(LabError::Invalid(format!("{name} {x} outside [0, 1]")));
                }
            }
            Ok(())
        };
        in_unit("flip_rate", self.flip_rate)?;
        in_unit("ddr", self.ddr)?;
        if let Some(s) = self.bg_ssim {
            if !(-1.0..=1.0).contains(&s) {
                return Err(LabError::Invalid(format!("bg_ssim {s} outside [-1, 1]")));
            }
        }
        Ok(())
    }
}

/// SHA-256 hex of a canonical byte string; runs stamp their resolved config
/// with this so outputs are attributable to exact inputs.
pub fn fingerprint(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
