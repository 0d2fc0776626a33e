//! Frozen evaluation classifier: two strided convolutions and a pooled
//! linear head. Used for flip/confidence/DDR scoring, as the feature
//! extractor behind the perceptual-distance proxy, and (with a binary head)
//! as the downstream lesion detector.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use steerlab_nn::{io as tio, ops, randn, Graph, Rng, Tensor};

use crate::error::{LabError, Result};

use super::metrics::roc_auc;

const C1: usize = 12;
const C2: usize = 24;
const KERNEL: usize = 3;
const STRIDE: usize = 2;
const PAD: usize = 1;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self { epochs: 16, batch_size: 16, lr: 1e-2, seed: 4242 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleManifest {
    pub format: String,
    pub n_classes: usize,
    pub image_size: usize,
    pub accuracy: f32,
    pub auc: f32,
    pub seed: u64,
    pub epochs: usize,
    pub checksum: String,
}

/// A trained, frozen classifier over `[3, s, s]` images.
#[derive(Debug, Clone)]
pub struct OracleClassifier {
    pub n_classes: usize,
    pub image_size: usize,
    tensors: BTreeMap<String, Tensor>,
    /// Held-out accuracy recorded at training time.
    pub accuracy: f32,
    /// Macro one-vs-rest AUC on the same split.
    pub auc: f32,
}

fn init_tensors(n_classes: usize, rng: &mut Rng) -> Result<BTreeMap<String, Tensor>> {
    let mut tensors = BTreeMap::new();
    let he = |rng: &mut Rng, shape: Vec<usize>, fan_in: usize| -> Result<Tensor> {
        let std = (2.0 / fan_in as f32).sqrt();
        let t = randn(rng, &shape)?;
        Tensor::from_vec(shape, t.data().iter().map(|&v| v * std).collect())
            .map_err(LabError::from)
    };
    tensors.insert("conv1.w".into(), he(rng, vec![C1, 3, KERNEL, KERNEL], 3 * KERNEL * KERNEL)?);
    tensors.insert("conv1.b".into(), Tensor::zeros(vec![C1]));
    tensors.insert("conv2.w".into(), he(rng, vec![C2, C1, KERNEL, KERNEL], C1 * KERNEL * KERNEL)?);
    tensors.insert("conv2.b".into(), Tensor::zeros(vec![C2]));
    tensors.insert("head.avg_w".into(), he(rng, vec![C2, n_classes], C2)?);
    tensors.insert("head.max_w".into(), he(rng, vec![C2, n_classes], C2)?);
    tensors.insert("head.b".into(), Tensor::zeros(vec![n_classes]));
    Ok(tensors)
}

impl OracleClassifier {
    /// Cross-entropy training; deterministic in `(items, settings)`.
    pub fn train(
        items: &[(Tensor, usize)],
        val: &[(Tensor, usize)],
        n_classes: usize,
        settings: &OracleSettings,
    ) -> Result<Self> {
        if items.is_empty() || val.is_empty() {
            return Err(LabError::Invalid("oracle training needs train and val items".into()));
        }
        let image_size = items[0].0.dims3()?.1;
        let root = Rng::new(settings.seed, 0);
        let mut tensors = init_tensors(n_classes, &mut root.derive("init", 0))?;
        let mut adam = crate::dit::AdamState::new();

        for epoch in 0..settings.epochs {
            let mut order: Vec<usize> = (0..items.len()).collect();
            root.derive("shuffle", epoch as u64).shuffle(&mut order);
            for chunk in order.chunks(settings.batch_size.max(1)) {
                let results: Vec<Result<steerlab_nn::Gradients>> = chunk
                    .par_iter()
                    .map(|&idx| {
                        let (image, label) = &items[idx];
                        let mut g = Graph::new();
                        let logits = graph_logits(&mut g, &tensors, image, n_classes)?;
                        let loss = g.cross_entropy_logits(logits, &[*label])?;
                        Ok(g.backward(loss)?)
                    })
                    .collect();
                let mut summed: BTreeMap<String, Vec<f32>> = BTreeMap::new();
                let count = results.len() as f32;
                for res in results {
                    let grads = res?;
                    for (name, g) in grads.iter() {
                        match summed.get_mut(name) {
                            Some(acc) => {
                                for (a, &v) in acc.iter_mut().zip(g.data().iter()) {
                                    *a += v;
                                }
                            }
                            None => {
                                summed.insert(name.clone(), g.data().to_vec());
                            }
                        }
                    }
                }
                for g in summed.values_mut() {
                    for v in g.iter_mut() {
                        *v /= count;
                    }
                }
                adam.step_tensors(&mut tensors, &summed, settings.lr)?;
            }
        }

        let mut oracle =
            Self { n_classes, image_size, tensors, accuracy: 0.0, auc: 0.0 };
        oracle.accuracy = oracle.accuracy_on(val)?;
        oracle.auc = oracle.macro_auc_on(val)?;
        Ok(oracle)
    }

    /// Class logits, `[1, n_classes]`. The head pools features two ways
    /// (spatial mean and spatial max) so small focal concepts are not
    /// averaged away, and sums the two linear paths.
    pub fn logits(&self, image: &Tensor) -> Result<Tensor> {
        let f = self.features(image)?;
        let avg = ops::global_avg_pool(&f)?.reshape(vec![1, C2])?;
        let max = ops::global_max_pool(&f)?.reshape(vec![1, C2])?;
        let za = ops::matmul(&avg, self.tensor("head.avg_w")?)?;
        let zm = ops::matmul(&max, self.tensor("head.max_w")?)?;
        let z = ops::add(&za, &zm)?;
        Ok(ops::add_bias(&z, self.tensor("head.b")?)?)
    }

    /// Softmax class probabilities.
    pub fn probs(&self, image: &Tensor) -> Result<Vec<f32>> {
        Ok(ops::softmax_rows(&self.logits(image)?)?.data().to_vec())
    }

    /// Argmax class (lowest index wins ties).
    pub fn predict(&self, image: &Tensor) -> Result<usize> {
        let logits = self.logits(image)?;
        let mut best = 0usize;
        for (i, &v) in logits.data().iter().enumerate() {
            if v > logits.data()[best] {
                best = i;
            }
        }
        Ok(best)
    }

    /// Penultimate feature maps (second convolution after activation),
    /// `[24, s/4, s/4]`.
    pub fn features(&self, image: &Tensor) -> Result<Tensor> {
        let h1 = ops::conv2d(image, self.tensor("conv1.w")?, self.tensor("conv1.b")?, STRIDE, PAD)?;
        let h1 = ops::gelu(&h1)?;
        let h2 = ops::conv2d(&h1, self.tensor("conv2.w")?, self.tensor("conv2.b")?, STRIDE, PAD)?;
        Ok(ops::gelu(&h2)?)
    }

    /// Input-pixel receptive field of feature cell `(i, j)`, clipped:
    /// `(y0, y1, x0, x1)` inclusive. Two stride-2 pad-1 3x3 convolutions
    /// give stride 4 and a 7-pixel footprint.
    pub fn receptive_field(&self, i: usize, j: usize) -> (usize, usize, usize, usize) {
        let span = |o: usize| {
            let lo = (4 * o as isize - 3).max(0) as usize;
            let hi = ((4 * o + 3).min(self.image_size - 1)) as usize;
            (lo, hi)
        };
        let (y0, y1) = span(i);
        let (x0, x1) = span(j);
        (y0, y1, x0, x1)
    }

    pub fn accuracy_on(&self, items: &[(Tensor, usize)]) -> Result<f32> {
        let hits: Vec<Result<bool>> = items
            .par_iter()
            .map(|(image, label)| Ok(self.predict(image)? == *label))
            .collect();
        let mut correct = 0usize;
        for h in &hits {
            if *h.as_ref().map_err(|e| LabError::Invalid(e.to_string()))? {
                correct += 1;
            }
        }
        Ok(correct as f32 / items.len() as f32)
    }

    /// One-vs-rest AUC averaged over classes present in the set.
    pub fn macro_auc_on(&self, items: &[(Tensor, usize)]) -> Result<f32> {
        let probs: Vec<Result<Vec<f32>>> =
            items.par_iter().map(|(image, _)| self.probs(image)).collect();
        let probs: Vec<Vec<f32>> = probs.into_iter().collect::<Result<_>>()?;
        let mut aucs = Vec::new();
        for class in 0..self.n_classes {
            let labels: Vec<bool> = items.iter().map(|(_, l)| *l == class).collect();
            if labels.iter().all(|&l| !l) || labels.iter().all(|&l| l) {
                continue;
            }
            let scores: Vec<f32> = probs.iter().map(|p| p[class]).collect();
            aucs.push(roc_auc(&scores, &labels)?);
        }
        if aucs.is_empty() {
            return Err(LabError::Invalid("validation set has a single class".into()));
        }
        Ok(aucs.iter().sum::<f32>() / aucs.len() as f32)
    }

    /// Evaluations call this before using an oracle.
    pub fn require_floor(&self, floor: f32) -> Result<()> {
        if self.accuracy < floor {
            return Err(LabError::OracleBelowFloor { accuracy: self.accuracy, floor });
        }
        Ok(())
    }

    fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| LabError::Invalid(format!("oracle missing tensor `{name}`")))
    }

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

    pub fn save(&self, dir: &Path, seed: u64, epochs: usize) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        for (name, tensor) in &self.tensors {
            tio::write_tensor(&dir.join(format!("{name}.stensor")), tensor)?;
        }
        let manifest = OracleManifest {
            format: "steerlab-oracle-v1".into(),
            n_classes: self.n_classes,
            image_size: self.image_size,
            accuracy: self.accuracy,
            auc: self.auc,
            seed,
            epochs,
            checksum: format!("{:016x}", self.checksum()),
        };
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| LabError::json(&path, e))?;
        fs::write(&path, json).map_err(|e| LabError::io(&path, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let raw = fs::read_to_string(&path).map_err(|e| LabError::io(&path, e))?;
        let manifest: OracleManifest =
            serde_json::from_str(&raw).map_err(|e| LabError::json(&path, e))?;
        let mut tensors = BTreeMap::new();
        for name in ["conv1.w", "conv1.b", "conv2.w", "conv2.b", "head.avg_w", "head.max_w", "head.b"] {
            tensors.insert(name.to_string(), tio::read_tensor(&dir.join(format!("{name}.stensor")))?);
        }
        let oracle = Self {
            n_classes: manifest.n_classes,
            image_size: manifest.image_size,
            tensors,
            accuracy: manifest.accuracy,
            auc: manifest.auc,
        };
        if format!("{:016x}", oracle.checksum()) != manifest.checksum {
            return Err(LabError::Invalid(format!(
                "oracle at {} fails checksum",
                dir.display()
            )));
        }
        Ok(oracle)
    }
}

fn graph_logits(
    g: &mut Graph,
    tensors: &BTreeMap<String, Tensor>,
    image: &Tensor,
    _n_classes: usize,
) -> Result<steerlab_nn::NodeId> {
    let get = |name: &str| -> Result<Tensor> {
        tensors
            .get(name)
            .cloned()
            .ok_or_else(|| LabError::Invalid(format!("missing tensor `{name}`")))
    };
    let x = g.input(image.clone());
    let w1 = g.param("conv1.w", get("conv1.w")?);
    let b1 = g.param("conv1.b", get("conv1.b")?);
    let w2 = g.param("conv2.w", get("conv2.w")?);
    let b2 = g.param("conv2.b", get("conv2.b")?);
    let hwa = g.param("head.avg_w", get("head.avg_w")?);
    let hwm = g.param("head.max_w", get("head.max_w")?);
    let hb = g.param("head.b", get("head.b")?);

    let h = g.conv2d(x, w1, b1, STRIDE, PAD)?;
    let h = g.gelu(h)?;
    let h = g.conv2d(h, w2, b2, STRIDE, PAD)?;
    let h = g.gelu(h)?;
    let avg = g.global_avg_pool(h)?;
    let avg = g.reshape(avg, vec![1, C2])?;
    let max = g.global_max_pool(h)?;
    let max = g.reshape(max, vec![1, C2])?;
    let za = g.matmul(avg, hwa)?;
    let zm = g.matmul(max, hwm)?;
    let z = g.add(za, zm)?;
    Ok(g.add_bias(z, hb)?)
}

/// L2 feature distance restricted to mask-overlapping receptive fields,
/// RMS-normalized by the included feature count. Stands in for a perceptual
/// metric; symmetric and zero at identity.
pub fn feature_distance(
    oracle: &OracleClassifier,
    a: &Tensor,
    b: &Tensor,
    mask: &Tensor,
) -> Result<f32> {
    if a.shape() != b.shape() {
        return Err(LabError::Invalid("feature distance needs equal shapes".into()));
    }
    let fa = oracle.features(a)?;
    let fb = oracle.features(b)?;
    let (c, fh, fw) = fa.dims3()?;
    let (mh, mw) = mask.dims2()?;
    if mask.data().iter().all(|&v| v == 0.0) {
        return Err(LabError::Invalid("empty mask".into()));
    }
    let md = mask.data();
    let mut acc = 0.0f32;
    let mut cells = 0usize;
    for i in 0..fh {
        for j in 0..fw {
            let (y0, y1, x0, x1) = oracle.receptive_field(i, j);
            let mut overlaps = false;
            'scan: for y in y0..=y1.min(mh - 1) {
                for x in x0..=x1.min(mw - 1) {
                    if md[y * mw + x] != 0.0 {
                        overlaps = true;
                        break 'scan;
                    }
                }
            }
            if !overlaps {
                continue;
            }
            cells += 1;
            for ch in 0..c {
                let idx = (ch * fh + i) * fw + j;
                let d = fa.data()[idx] - fb.data()[idx];
                acc += d * d;
            }
        }
    }
    if cells == 0 {
        return Err(LabError::Invalid("mask overlaps no receptive fields".into()));
    }
    Ok((acc / (cells * c) as f32).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{render_scene, SceneSpec};

    fn constant_image(color: [f32; 3], size: usize) -> Tensor {
        let mut data = Vec::with_capacity(3 * size * size);
        for ch in 0..3 {
            data.extend(std::iter::repeat(color[ch]).take(size * size));
        }
        Tensor::from_vec(vec![3, size, size], data).unwrap()
    }

    #[test]
    fn trivially_separable_corpus_reaches_accuracy_one() {
        let items: Vec<(Tensor, usize)> = (0..16)
            .map(|i| {
                let dim = (i % 8) as f32 * 0.01;
                if i % 2 == 0 {
                    (constant_image([0.9 - dim, 0.1, 0.1], 16), 0)
                } else {
                    (constant_image([0.1, 0.1, 0.9 - dim], 16), 1)
                }
            })
            .collect();
        let settings = OracleSettings { epochs: 20, batch_size: 4, lr: 1e-2, seed: 1 };
        let oracle = OracleClassifier::train(&items, &items, 2, &settings).unwrap();
        assert_eq!(oracle.accuracy, 1.0);
        assert_eq!(oracle.auc, 1.0);
        assert!(oracle.require_floor(0.95).is_ok());
    }

    #[test]
    fn training_is_deterministic() {
        let items: Vec<(Tensor, usize)> = (0..8)
            .map(|i| {
                let scene = render_scene(&SceneSpec {
                    seed: i,
                    has_lesion: i % 2 == 0,
                    has_dye: false,
                    background_style: 0,
                    image_size: 16,
                })
                .unwrap();
                (scene.image, (i % 2) as usize)
            })
            .collect();
        let settings = OracleSettings { epochs: 3, batch_size: 4, lr: 1e-3, seed: 9 };
        let a = OracleClassifier::train(&items, &items, 2, &settings).unwrap();
        let b = OracleClassifier::train(&items, &items, 2, &settings).unwrap();
        assert_eq!(a.checksum(), b.checksum());
    }

    #[test]
    fn floor_rejection() {
        let oracle = OracleClassifier {
            n_classes: 2,
            image_size: 16,
            tensors: init_tensors(2, &mut Rng::new(0, 0)).unwrap(),
            accuracy: 0.8,
            auc: 0.8,
        };
        match oracle.require_floor(0.95) {
            Err(LabError::OracleBelowFloor { .. }) => {}
            other => panic!("expected floor rejection, got {other:?}"),
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let oracle = OracleClassifier {
            n_classes: 4,
            image_size: 32,
            tensors: init_tensors(4, &mut Rng::new(3, 0)).unwrap(),
            accuracy: 0.97,
            auc: 0.99,
        };
        oracle.save(dir.path(), 3, 10).unwrap();
        let loaded = OracleClassifier::load(dir.path()).unwrap();
        assert_eq!(loaded.checksum(), oracle.checksum());
        assert_eq!(loaded.accuracy, 0.97);
    }

    #[test]
    fn feature_distance_is_a_semimetric() {
        let oracle = OracleClassifier {
            n_classes: 4,
            image_size: 32,
            tensors: init_tensors(4, &mut Rng::new(5, 0)).unwrap(),
            accuracy: 1.0,
            auc: 1.0,
        };
        let a = render_scene(&SceneSpec {
            seed: 1,
            has_lesion: false,
            has_dye: false,
            background_style: 0,
            image_size: 32,
        })
        .unwrap()
        .image;
        let b = render_scene(&SceneSpec {
            seed: 1,
            has_lesion: true,
            has_dye: false,
            background_style: 0,
            image_size: 32,
        })
        .unwrap()
        .image;
        let mask = Tensor::full(vec![32, 32], 1.0).unwrap();
        assert_eq!(feature_distance(&oracle, &a, &a, &mask).unwrap(), 0.0);
        let dab = feature_distance(&oracle, &a, &b, &mask).unwrap();
        let dba = feature_distance(&oracle, &b, &a, &mask).unwrap();
        assert_eq!(dab.to_bits(), dba.to_bits());
        assert!(dab > 0.0);
    }

    #[test]
    fn lesion_moves_features_more_than_nothing() {
        let oracle = OracleClassifier {
            n_classes: 4,
            image_size: 32,
            tensors: init_tensors(4, &mut Rng::new(6, 0)).unwrap(),
            accuracy: 1.0,
            auc: 1.0,
        };
        let mut wins = 0usize;
        let total = 40;
        for seed in 0..total {
            let plain = render_scene(&SceneSpec {
                seed,
                has_lesion: false,
                has_dye: false,
                background_style: 0,
                image_size: 32,
            })
            .unwrap();
            let lesioned = render_scene(&SceneSpec {
                seed,
                has_lesion: true,
                has_dye: false,
                background_style: 0,
                image_size: 32,
            })
            .unwrap();
            let mask = Tensor::full(vec![32, 32], 1.0).unwrap();
            let d_lesion = feature_distance(&oracle, &plain.image, &lesioned.image, &mask).unwrap();
            let d_same = feature_distance(&oracle, &plain.image, &plain.image, &mask).unwrap();
            if d_lesion > d_same {
                wins += 1;
            }
        }
        assert!(wins as f32 / total as f32 >= 0.95, "wins {wins}/{total}");
    }

    #[test]
    fn receptive_field_geometry() {
        let oracle = OracleClassifier {
            n_classes: 2,
            image_size: 32,
            tensors: init_tensors(2, &mut Rng::new(0, 0)).unwrap(),
            accuracy: 1.0,
            auc: 1.0,
        };
        assert_eq!(oracle.receptive_field(0, 0), (0, 3, 0, 3));
        assert_eq!(oracle.receptive_field(2, 3), (5, 11, 9, 15));
        assert_eq!(oracle.receptive_field(7, 7), (25, 31, 25, 31));
    }
}
