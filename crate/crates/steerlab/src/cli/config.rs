//! Strict JSON run configuration.
//!
//! Unknown keys anywhere are rejected. Every random seed is explicit in the
//! resolved config a run writes next to its outputs, so any output directory
//! can be reproduced from its own `config.resolved.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dit::{ModelConfig, TrainSettings};
use crate::error::{LabError, Result};
use crate::eval::{fingerprint, OracleSettings};
use crate::steer::{SteerConfig, SteerMode};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: Option<TrainSettings>,
    #[serde(default)]
    pub vectors: Option<VectorsConfig>,
    #[serde(default)]
    pub steer: Option<SteerSection>,
    #[serde(default)]
    pub eval: Option<EvalConfig>,
    #[serde(default)]
    pub ablate: Option<AblateConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_per_class: usize,
    pub split_seed: u64,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
}

fn default_image_size() -> usize {
    32
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VectorsConfig {
    /// `lesion` or `dye`.
    pub concept: String,
    /// Seeds per prompt side.
    pub z: usize,
    pub layer_start: usize,
    pub layer_end: usize,
    pub seed: u64,
    /// When set, estimate one bank per entry and also write a pairwise
    /// similarity summary.
    #[serde(default)]
    pub z_grid: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteerSection {
    pub concept: String,
    pub alpha: f32,
    pub layer_start: usize,
    pub layer_end: usize,
    #[serde(default)]
    pub steps: Option<Vec<usize>>,
    #[serde(default = "default_mode")]
    pub mode: SteerMode,
    pub n_pairs: usize,
    pub seed: u64,
}

fn default_mode() -> SteerMode {
    SteerMode::Remove
}

impl SteerSection {
    pub fn steer_config(&self) -> SteerConfig {
        SteerConfig {
            alpha: self.alpha,
            layer_start: self.layer_start,
            layer_end: self.layer_end,
            steps: self.steps.clone(),
            mode: self.mode,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Any of `counterfactual`, `dye`, `downstream`.
    pub suites: Vec<String>,
    pub oracle: OracleSettings,
    #[serde(default = "default_oracle_floor")]
    pub oracle_floor: f32,
    #[serde(default = "default_detector_seeds")]
    pub detector_seeds: Vec<u64>,
    #[serde(default = "default_n_synth")]
    pub n_synth: usize,
    /// Real images per class for the downstream detector.
    #[serde(default = "default_n_real")]
    pub n_real_per_class: usize,
    #[serde(default = "default_conditions")]
    pub conditions: Vec<String>,
    pub seed: u64,
}

fn default_oracle_floor() -> f32 {
    0.95
}

fn default_detector_seeds() -> Vec<u64> {
    vec![11, 12, 13, 14, 15]
}

fn default_n_synth() -> usize {
    80
}

fn default_n_real() -> usize {
    20
}

fn default_conditions() -> Vec<String> {
    vec!["none".into(), "reprompt".into(), "counterfactual-pairs".into()]
}

/// Grid sweeps. The defaults mirror the published ablation grids, with
/// layer windows rescaled from the 28-layer reference depth to the toy
/// depth by fraction-of-depth rounding (see [`scale_window`]).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    pub alphas: Vec<f32>,
    /// Inclusive `[start, end]` layer windows.
    pub windows: Vec<[usize; 2]>,
    pub z_grid: Vec<usize>,
    pub n_pairs: usize,
    pub seed: u64,
}

pub const REFERENCE_DEPTH: usize = 28;
pub const REFERENCE_WINDOWS: [[usize; 2]; 5] = [[0, 8], [8, 16], [12, 20], [0, 12], [8, 20]];

/// Map a layer window from one depth to another by fraction of depth,
/// rounding half away from zero, clamping into `[0, depth)`.
pub fn scale_window(window: [usize; 2], from_depth: usize, to_depth: usize) -> [usize; 2] {
    let map = |x: usize| -> usize {
        let scaled = (x as f64 * to_depth as f64 / from_depth as f64).round() as usize;
        scaled.min(to_depth - 1)
    };
    let (a, b) = (map(window[0]), map(window[1]));
    [a.min(b), a.max(b).max(a)]
}

impl AblateConfig {
    pub fn defaults_for_depth(n_layers: usize, seed: u64) -> Self {
        Self {
            alphas: vec![0.5, 1.0, 2.0, 2.5, 3.0],
            windows: REFERENCE_WINDOWS
                .iter()
                .map(|w| scale_window(*w, REFERENCE_DEPTH, n_layers))
                .collect(),
            z_grid: vec![30, 50, 80, 100],
            n_pairs: 48,
            seed,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        let cfg: RunConfig =
            serde_json::from_str(&raw).map_err(|e| LabError::Config(format!("{e}")))?;
        Ok(cfg)
    }

    /// Canonical serialized form; hashed for the run fingerprint.
    pub fn canonical_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| LabError::Config(format!("serialize: {e}")))
    }

    pub fn fingerprint(&self) -> Result<String> {
        Ok(fingerprint(self.canonical_json()?.as_bytes()))
    }

    /// Write `config.resolved.json` and `fingerprint.txt` into the output
    /// directory.
    pub fn write_resolved(&self) -> Result<()> {
        fs::create_dir_all(&self.out_dir).map_err(|e| LabError::io(&self.out_dir, e))?;
        let json = self.canonical_json()?;
        let cfg_path = self.out_dir.join("config.resolved.json");
        fs::write(&cfg_path, &json).map_err(|e| LabError::io(&cfg_path, e))?;
        let fp_path = self.out_dir.join("fingerprint.txt");
        fs::write(&fp_path, self.fingerprint()?).map_err(|e| LabError::io(&fp_path, e))?;
        Ok(())
    }

    /// Replace every section seed with one derived from `master`; used by
    /// the `--seed` flag. Section tags keep the derivations independent.
    pub fn override_seeds(&mut self, master: u64) {
        let derive = |tag: u64| -> u64 {
            let mut x = master ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
            x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
            x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
            x ^ (x >> 31)
        };
        if let Some(d) = &mut self.data {
            d.split_seed = derive(1);
        }
        if let Some(t) = &mut self.train {
            t.seed = derive(2);
        }
        if let Some(v) = &mut self.vectors {
            v.seed = derive(3);
        }
        if let Some(s) = &mut self.steer {
            s.seed = derive(4);
        }
        if let Some(e) = &mut self.eval {
            e.seed = derive(5);
            e.oracle.seed = derive(6);
        }
        if let Some(a) = &mut self.ablate {
            a.seed = derive(7);
        }
    }

    pub fn data(&self) -> Result<&DataConfig> {
        self.data.as_ref().ok_or_else(|| LabError::Config("missing `data` section".into()))
    }

    pub fn model(&self) -> Result<&ModelConfig> {
        self.model.as_ref().ok_or_else(|| LabError::Config("missing `model` section".into()))
    }

    pub fn train_settings(&self) -> Result<&TrainSettings> {
        self.train.as_ref().ok_or_else(|| LabError::Config("missing `train` section".into()))
    }

    pub fn vectors(&self) -> Result<&VectorsConfig> {
        self.vectors.as_ref().ok_or_else(|| LabError::Config("missing `vectors` section".into()))
    }

    pub fn steer(&self) -> Result<&SteerSection> {
        self.steer.as_ref().ok_or_else(|| LabError::Config("missing `steer` section".into()))
    }

    pub fn eval(&self) -> Result<&EvalConfig> {
        self.eval.as_ref().ok_or_else(|| LabError::Config("missing `eval` section".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected_everywhere() {
        let json = r#"{"out_dir": "x", "data": {"n_per_class": 4, "split_seed": 1, "bogus": 2}}"#;
        assert!(serde_json::from_str::<RunConfig>(json).is_err());
        let json = r#"{"out_dir": "x", "typo_section": {}}"#;
        assert!(serde_json::from_str::<RunConfig>(json).is_err());
    }

    #[test]
    fn minimal_config_parses() {
        let json = r#"{"out_dir": "runs/demo", "data": {"n_per_class": 8, "split_seed": 3}}"#;
        let cfg: RunConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.data().unwrap().image_size, 32);
        assert!(cfg.model.is_none());
        assert!(cfg.train_settings().is_err());
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a: RunConfig = serde_json::from_str(
            r#"{"out_dir": "x", "data": {"n_per_class": 8, "split_seed": 3}}"#,
        )
        .unwrap();
        let b: RunConfig = serde_json::from_str(
            r#"{"out_dir": "x", "data": {"n_per_class": 8, "split_seed": 4}}"#,
        )
        .unwrap();
        assert_eq!(a.fingerprint().unwrap(), a.fingerprint().unwrap());
        assert_ne!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
    }

    #[test]
    fn seed_override_rewrites_all_sections() {
        let mut cfg: RunConfig = serde_json::from_str(
            r#"{
                "out_dir": "x",
                "data": {"n_per_class": 8, "split_seed": 3},
                "train": {"epochs": 1, "batch_size": 4, "lr": 3e-4, "seed": 5},
                "vectors": {"concept": "lesion", "z": 4, "layer_start": 0, "layer_end": 3, "seed": 6}
            }"#,
        )
        .unwrap();
        cfg.override_seeds(99);
        let d = cfg.data().unwrap().split_seed;
        let t = cfg.train_settings().unwrap().seed;
        let v = cfg.vectors().unwrap().seed;
        assert_ne!(d, 3);
        assert_ne!(t, 5);
        assert_ne!(v, 6);
        assert_ne!(d, t);
        let mut cfg2: RunConfig = serde_json::from_str(&cfg.canonical_json().unwrap()).unwrap();
        cfg2.override_seeds(99);
        assert_eq!(cfg2.data().unwrap().split_seed, d);
    }

    #[test]
    fn window_scaling_matches_documented_mapping() {
        // 28-layer reference windows onto 8 layers
        let scaled: Vec<[usize; 2]> = REFERENCE_WINDOWS
            .iter()
            .map(|w| scale_window(*w, REFERENCE_DEPTH, 8))
            .collect();
        assert_eq!(scaled, vec![[0, 2], [2, 5], [3, 6], [0, 3], [2, 6]]);
    }
}
