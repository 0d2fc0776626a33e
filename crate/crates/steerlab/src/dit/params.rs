//! Named parameter store, initialization, and checkpoint directories.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use steerlab_nn::{io as tio, randn, Rng, Tensor};

use crate::error::{LabError, Result};
use crate::synth::VOCAB_SIZE;

use super::ModelConfig;

const INIT_STD: f32 = 0.02;

/// All trainable tensors, keyed by stable names. Frozen after training:
/// steering and capture never mutate a loaded checkpoint.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
    pub trained: bool,
}

impl ModelParams {
    /// Random initialization: weights `N(0, 0.02)`, biases zero,
    /// layer-norm gains one.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut tensors = BTreeMap::new();
        let d = config.d;
        let pd = config.patch_dim();
        let ff = config.ff_dim();

        let weight = |tensors: &mut BTreeMap<String, Tensor>,
                          name: String,
                          shape: Vec<usize>,
                          rng: &mut Rng|
         -> Result<()> {
            let t = randn(rng, &shape)?;
            let scaled: Vec<f32> = t.data().iter().map(|&v| v * INIT_STD).collect();
            tensors.insert(name, Tensor::from_vec(shape, scaled)?);
            Ok(())
        };
        let zeros = |tensors: &mut BTreeMap<String, Tensor>, name: String, shape: Vec<usize>| {
            tensors.insert(name, Tensor::zeros(shape));
        };
        let ones = |tensors: &mut BTreeMap<String, Tensor>,
                    name: String,
                    shape: Vec<usize>|
         -> Result<()> {
            tensors.insert(name, Tensor::full(shape, 1.0)?);
            Ok(())
        };

        weight(&mut tensors, "patch_embed.w".into(), vec![pd, d], rng)?;
        zeros(&mut tensors, "patch_embed.b".into(), vec![d]);
        weight(&mut tensors, "unembed.w".into(), vec![d, pd], rng)?;
        zeros(&mut tensors, "unembed.b".into(), vec![pd]);
        weight(&mut tensors, "time_embed".into(), vec![config.t_train, d], rng)?;
        weight(&mut tensors, "prompt_embed".into(), vec![VOCAB_SIZE, config.d_text], rng)?;

        for l in 0..config.n_layers {
            for ln in ["ln_sa", "ln_ca", "ln_ff"] {
                ones(&mut tensors, format!("layer{l}.{ln}.gain"), vec![d])?;
                zeros(&mut tensors, format!("layer{l}.{ln}.bias"), vec![d]);
            }
            for proj in ["wq", "wk", "wv", "wo"] {
                weight(&mut tensors, format!("layer{l}.sa.{proj}"), vec![d, d], rng)?;
            }
            for b in ["bq", "bk", "bv", "bo"] {
                zeros(&mut tensors, format!("layer{l}.sa.{b}"), vec![d]);
            }
            weight(&mut tensors, format!("layer{l}.ca.wq"), vec![d, d], rng)?;
            weight(&mut tensors, format!("layer{l}.ca.wk"), vec![config.d_text, d], rng)?;
            weight(&mut tensors, format!("layer{l}.ca.wv"), vec![config.d_text, d], rng)?;
            weight(&mut tensors, format!("layer{l}.ca.wo"), vec![d, d], rng)?;
            for b in ["bq", "bk", "bv", "bo"] {
                zeros(&mut tensors, format!("layer{l}.ca.{b}"), vec![d]);
            }
            weight(&mut tensors, format!("layer{l}.ff.w1"), vec![d, ff], rng)?;
            zeros(&mut tensors, format!("layer{l}.ff.b1"), vec![ff]);
            weight(&mut tensors, format!("layer{l}.ff.w2"), vec![ff, d], rng)?;
            zeros(&mut tensors, format!("layer{l}.ff.b2"), vec![d]);
        }

        Ok(Self { config: *config, tensors, trained: false })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| LabError::Invalid(format!("unknown parameter `{name}`")))
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.tensors.get_mut(name) {
            Some(slot) => {
                if slot.shape() != value.shape() {
                    return Err(LabError::Invalid(format!(
                        "parameter `{name}` shape change {:?} -> {:?}",
                        slot.shape(),
                        value.shape()
                    )));
                }
                *slot = value;
                Ok(())
            }
            None => Err(LabError::Invalid(format!("unknown parameter `{name}`"))),
        }
    }

    /// Iterate parameters in stable name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// FNV-1a over names and raw element bits, in name order. Used to verify
    /// the frozen-backbone guarantee around capture and steering runs.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (name, tensor) in &self.tensors {
            eat(name.as_bytes());
            for &v in tensor.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Write a checkpoint directory: `manifest.json` plus one STEERTENSOR
    /// file per parameter.
    pub fn save(&self, dir: &Path, manifest: &CheckpointManifest) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        for (name, tensor) in &self.tensors {
            tio::write_tensor(&dir.join(format!("{name}.stensor")), tensor)?;
        }
        let path = dir.join("manifest.json");
        let json =
            serde_json::to_string_pretty(manifest).map_err(|e| LabError::json(&path, e))?;
        fs::write(&path, json).map_err(|e| LabError::io(&path, e))?;
        Ok(())
    }

    /// Load a checkpoint directory written by [`ModelParams::save`].
    pub fn load(dir: &Path) -> Result<(Self, CheckpointManifest)> {
        let path = dir.join("manifest.json");
        let raw = fs::read_to_string(&path).map_err(|e| LabError::io(&path, e))?;
        let manifest: CheckpointManifest =
            serde_json::from_str(&raw).map_err(|e| LabError::json(&path, e))?;
        manifest.config.validate()?;
        let mut rng = Rng::new(0, 0);
        let mut params = ModelParams::init(&manifest.config, &mut rng)?;
        let names: Vec<String> = params.tensors.keys().cloned().collect();
        for name in names {
            let t = tio::read_tensor(&dir.join(format!("{name}.stensor")))?;
            params.set(&name, t)?;
        }
        params.trained = manifest.trained;
        let checksum = format!("{:016x}", params.checksum());
        if checksum != manifest.checksum {
            return Err(LabError::Invalid(format!(
                "checkpoint {} checksum mismatch: manifest {} vs tensors {}",
                dir.display(),
                manifest.checksum,
                checksum
            )));
        }
        Ok((params, manifest))
    }

    pub fn manifest(&self, train_seed: Option<u64>, epochs: usize, loss_curve: Vec<f32>) -> CheckpointManifest {
        CheckpointManifest {
            format: "steerlab-checkpoint-v1".into(),
            config: self.config,
            trained: self.trained,
            train_seed,
            epochs,
            loss_curve,
            checksum: format!("{:016x}", self.checksum()),
        }
    }
}

/// Sidecar metadata for a checkpoint directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub config: ModelConfig,
    pub trained: bool,
    pub train_seed: Option<u64>,
    pub epochs: usize,
    pub loss_curve: Vec<f32>,
    pub checksum: String,
}
