//! Mean / subtract-and-normalize estimation of the direction bank.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use steerlab_nn::{io as tio, Tensor};

use crate::error::{LabError, Result};

use super::capture::ActivationTrace;
use super::{dot, l2_norm};

/// Unit steering directions per `(layer, step)`, with the raw positive and
/// negative means retained so the normalization can be audited offline.
#[derive(Debug, Clone)]
pub struct PathologyVectorBank {
    pub manifest: BankManifest,
    vectors: BTreeMap<(usize, usize), Tensor>,
    mean_pos: BTreeMap<(usize, usize), Tensor>,
    mean_neg: BTreeMap<(usize, usize), Tensor>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankManifest {
    pub format: String,
    pub prompt_pos: String,
    pub prompt_neg: String,
    pub z: usize,
    pub seeds: Vec<u64>,
    pub layer_start: usize,
    pub layer_end: usize,
    pub t_sample: usize,
    pub d: usize,
}

impl PathologyVectorBank {
    /// Unit direction for a site, if the bank covers it.
    pub fn vector(&self, layer: usize, step: usize) -> Option<&Tensor> {
        self.vectors.get(&(layer, step))
    }

    pub fn mean_pos(&self, layer: usize, step: usize) -> Option<&Tensor> {
        self.mean_pos.get(&(layer, step))
    }

    pub fn mean_neg(&self, layer: usize, step: usize) -> Option<&Tensor> {
        self.mean_neg.get(&(layer, step))
    }

    pub fn covers(&self, layer_start: usize, layer_end: usize, steps: &[usize]) -> bool {
        layer_start >= self.manifest.layer_start
            && layer_end <= self.manifest.layer_end
            && steps.iter().all(|&t| t >= 1 && t <= self.manifest.t_sample)
    }

    /// Build a bank directly from unit vectors (tests and synthetic setups).
    pub fn from_vectors(
        manifest: BankManifest,
        vectors: BTreeMap<(usize, usize), Tensor>,
    ) -> Result<Self> {
        for ((l, t), v) in &vectors {
            let norm = l2_norm(v.data());
            if (norm - 1.0).abs() > 1e-6 {
                return Err(LabError::Invalid(format!(
                    "vector at layer {l}, step {t} has norm {norm}"
                )));
            }
        }
        let zeros: BTreeMap<(usize, usize), Tensor> = vectors
            .iter()
            .map(|(&k, v)| (k, Tensor::zeros(v.shape().to_vec())))
            .collect();
        Ok(Self { manifest, vectors, mean_pos: zeros.clone(), mean_neg: zeros })
    }

    /// Write `manifest.json`, `v.stensor` (`[layers, t_sample, d]`) and the
    /// raw means in the same layout.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        let m = &self.manifest;
        let layers = m.layer_end - m.layer_start + 1;
        let pack = |map: &BTreeMap<(usize, usize), Tensor>| -> Result<Tensor> {
            let mut data = Vec::with_capacity(layers * m.t_sample * m.d);
            for l in m.layer_start..=m.layer_end {
                for t in 1..=m.t_sample {
                    let v = map.get(&(l, t)).ok_or_else(|| {
                        LabError::Invalid(format!("bank missing site ({l}, {t})"))
                    })?;
                    data.extend_from_slice(v.data());
                }
            }
            Ok(Tensor::from_vec(vec![layers, m.t_sample, m.d], data)?)
        };
        tio::write_tensor(&dir.join("v.stensor"), &pack(&self.vectors)?)?;
        tio::write_tensor(&dir.join("mean_pos.stensor"), &pack(&self.mean_pos)?)?;
        tio::write_tensor(&dir.join("mean_neg.stensor"), &pack(&self.mean_neg)?)?;
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(m).map_err(|e| LabError::json(&path, e))?;
        fs::write(&path, json).map_err(|e| LabError::io(&path, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let raw = fs::read_to_string(&path).map_err(|e| LabError::io(&path, e))?;
        let manifest: BankManifest =
            serde_json::from_str(&raw).map_err(|e| LabError::json(&path, e))?;
        let layers = manifest.layer_end - manifest.layer_start + 1;
        let unpack = |name: &str| -> Result<BTreeMap<(usize, usize), Tensor>> {
            let t = tio::read_tensor(&dir.join(name))?;
            if t.shape() != [layers, manifest.t_sample, manifest.d] {
                return Err(LabError::Invalid(format!(
                    "{name} shape {:?} does not match manifest",
                    t.shape()
                )));
            }
            let mut map = BTreeMap::new();
            let d = manifest.d;
            for li in 0..layers {
                for ti in 0..manifest.t_sample {
                    let start = (li * manifest.t_sample + ti) * d;
                    let v = Tensor::from_vec(vec![d], t.data()[start..start + d].to_vec())?;
                    map.insert((manifest.layer_start + li, ti + 1), v);
                }
            }
            Ok(map)
        };
        Ok(Self {
            vectors: unpack("v.stensor")?,
            mean_pos: unpack("mean_pos.stensor")?,
            mean_neg: unpack("mean_neg.stensor")?,
            manifest,
        })
    }

    /// Mean cosine similarity between corresponding vectors of two banks
    /// over their shared sites.
    pub fn mean_cosine(&self, other: &PathologyVectorBank) -> Option<f32> {
        let mut acc = 0.0f32;
        let mut n = 0usize;
        for (key, v) in &self.vectors {
            if let Some(w) = other.vectors.get(key) {
                acc += dot(v.data(), w.data());
                n += 1;
            }
        }
        if n == 0 {
            None
        } else {
            Some(acc / n as f32)
        }
    }
}

fn mean_over_traces(
    traces: &[&ActivationTrace],
    layer: usize,
    step: usize,
    d: usize,
) -> Result<Vec<f32>> {
    let mut acc = vec![0.0f32; d];
    let mut count = 0usize;
    for trace in traces {
        let entry = trace.get(layer, step).ok_or_else(|| {
            LabError::Invalid(format!("trace {} missing site ({layer}, {step})", trace.seed))
        })?;
        let (tokens, dd) = entry.dims2()?;
        if dd != d {
            return Err(LabError::Invalid(format!("token dim {dd} != {d}")));
        }
        let data = entry.data();
        for tok in 0..tokens {
            for j in 0..d {
                acc[j] += data[tok * d + j];
            }
        }
        count += tokens;
    }
    for v in &mut acc {
        *v /= count as f32;
    }
    Ok(acc)
}

/// Average positive and negative traces over seeds and spatial tokens, then
/// L2-normalize the difference per `(layer, step)`.
///
/// Traces are aggregated in seed order so the means are summation-order
/// deterministic. A difference norm below `1e-8` at any site is an error
/// naming the site rather than a garbage direction.
pub fn estimate_vectors(
    pos: &[ActivationTrace],
    neg: &[ActivationTrace],
) -> Result<PathologyVectorBank> {
    if pos.is_empty() || pos.len() != neg.len() {
        return Err(LabError::Invalid(format!(
            "trace sets must be nonempty and equal length: {} vs {}",
            pos.len(),
            neg.len()
        )));
    }
    let mut pos_sorted: Vec<&ActivationTrace> = pos.iter().collect();
    let mut neg_sorted: Vec<&ActivationTrace> = neg.iter().collect();
    pos_sorted.sort_by_key(|t| t.seed);
    neg_sorted.sort_by_key(|t| t.seed);

    let first = pos_sorted[0];
    for (p, n) in pos_sorted.iter().zip(neg_sorted.iter()) {
        if p.seed != n.seed {
            return Err(LabError::Invalid(format!(
                "pos/neg trace seeds differ: {} vs {}",
                p.seed, n.seed
            )));
        }
        for t in [p, n] {
            if t.layer_start != first.layer_start
                || t.layer_end != first.layer_end
                || t.t_sample != first.t_sample
                || t.token_count()? != first.token_count()?
            {
                return Err(LabError::Invalid("trace grids do not match".into()));
            }
        }
    }

    let d = first
        .get(first.layer_start, 1)
        .ok_or_else(|| LabError::Invalid("trace missing first site".into()))?
        .dims2()?
        .1;

    let mut vectors = BTreeMap::new();
    let mut mean_pos = BTreeMap::new();
    let mut mean_neg = BTreeMap::new();
    for layer in first.layer_start..=first.layer_end {
        for step in 1..=first.t_sample {
            let hp = mean_over_traces(&pos_sorted, layer, step, d)?;
            let hn = mean_over_traces(&neg_sorted, layer, step, d)?;
            let diff: Vec<f32> = hp.iter().zip(hn.iter()).map(|(&a, &b)| a - b).collect();
            let norm = l2_norm(&diff);
            if norm < 1e-8 {
                return Err(LabError::DegenerateDirection { layer, step, norm });
            }
            let v: Vec<f32> = diff.iter().map(|&x| x / norm).collect();
            vectors.insert((layer, step), Tensor::from_vec(vec![d], v)?);
            mean_pos.insert((layer, step), Tensor::from_vec(vec![d], hp)?);
            mean_neg.insert((layer, step), Tensor::from_vec(vec![d], hn)?);
        }
    }

    let manifest = BankManifest {
        format: "steerlab-bank-v1".into(),
        prompt_pos: first.prompt_id.clone(),
        prompt_neg: neg_sorted[0].prompt_id.clone(),
        z: pos_sorted.len(),
        seeds: pos_sorted.iter().map(|t| t.seed).collect(),
        layer_start: first.layer_start,
        layer_end: first.layer_end,
        t_sample: first.t_sample,
        d,
    };
    Ok(PathologyVectorBank { manifest, vectors, mean_pos, mean_neg })
}

#[cfg(test)]
mod tests {
    use super::*;
    use steerlab_nn::{randn, Rng};

    fn trace_with(
        seed: u64,
        mut make: impl FnMut(usize, usize) -> Tensor,
        layers: (usize, usize),
        t_sample: usize,
    ) -> ActivationTrace {
        let mut entries = BTreeMap::new();
        for l in layers.0..=layers.1 {
            for t in 1..=t_sample {
                entries.insert((l, t), make(l, t));
            }
        }
        ActivationTrace::test_new(seed, layers.0, layers.1, t_sample, entries)
    }

    #[test]
    fn constant_offset_along_axis_gives_unit_axis_vector() {
        // pos = neg + c*e1 at every token: v must be e1 exactly, any c > 0
        for c in [0.5f32, 3.0, 1e-3] {
            let mut rng = Rng::new(1, 0);
            let base: Vec<Tensor> = (0..8).map(|_| randn(&mut rng, &[4, 3]).unwrap()).collect();
            let mut idx = 0;
            let mut neg_entries = BTreeMap::new();
            let mut pos_entries = BTreeMap::new();
            for l in 0..=1 {
                for t in 1..=4 {
                    let b = &base[idx];
                    idx += 1;
                    neg_entries.insert((l, t), b.clone());
                    let shifted: Vec<f32> = b
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| if i % 3 == 0 { v + c } else { v })
                        .collect();
                    pos_entries
                        .insert((l, t), Tensor::from_vec(vec![4, 3], shifted).unwrap());
                }
            }
            let pos = ActivationTrace::test_new(7, 0, 1, 4, pos_entries);
            let neg = ActivationTrace::test_new(7, 0, 1, 4, neg_entries);
            let bank = estimate_vectors(&[pos], &[neg]).unwrap();
            for l in 0..=1 {
                for t in 1..=4 {
                    let v = bank.vector(l, t).unwrap().data();
                    assert!((v[0] - 1.0).abs() < 1e-4, "c={c}: v={v:?}");
                    assert!(v[1].abs() < 1e-4 && v[2].abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn swapping_roles_negates_exactly() {
        let mut rng = Rng::new(3, 0);
        let pos = trace_with(1, |_, _| randn(&mut rng, &[4, 3]).unwrap(), (0, 0), 3);
        let neg = trace_with(1, |_, _| randn(&mut rng, &[4, 3]).unwrap(), (0, 0), 3);
        let fwd = estimate_vectors(&[pos.clone()], &[neg.clone()]).unwrap();
        let rev = estimate_vectors(&[neg], &[pos]).unwrap();
        for t in 1..=3 {
            let f = fwd.vector(0, t).unwrap().data();
            let r = rev.vector(0, t).unwrap().data();
            for (a, b) in f.iter().zip(r.iter()) {
                assert_eq!(a.to_bits(), (-b).to_bits());
            }
        }
    }

    #[test]
    fn degenerate_direction_is_an_error_naming_the_site() {
        let mut rng = Rng::new(5, 0);
        let t = randn(&mut rng, &[2, 3]).unwrap();
        let pos = trace_with(1, |_, _| t.clone(), (2, 2), 1);
        let neg = trace_with(1, |_, _| t.clone(), (2, 2), 1);
        match estimate_vectors(&[pos], &[neg]) {
            Err(LabError::DegenerateDirection { layer: 2, step: 1, .. }) => {}
            other => panic!("expected degenerate-direction error, got {other:?}"),
        }
    }

    #[test]
    fn matches_brute_force_oracle_on_hand_values() {
        // Z=2 seeds, 2 tokens, d=3 — oracle computed with straight f64 loops
        let pos1 = Tensor::from_vec(vec![2, 3], vec![1.0, 0.0, 2.0, 3.0, 1.0, 0.0]).unwrap();
        let pos2 = Tensor::from_vec(vec![2, 3], vec![0.5, 1.0, 1.5, 2.5, 0.0, 1.0]).unwrap();
        let neg1 = Tensor::from_vec(vec![2, 3], vec![0.0, 0.5, 1.0, 1.0, 0.5, 0.5]).unwrap();
        let neg2 = Tensor::from_vec(vec![2, 3], vec![0.5, 0.5, 0.5, 0.5, 0.5, 0.5]).unwrap();

        let mk = |t: &Tensor, seed| {
            let mut e = BTreeMap::new();
            e.insert((0usize, 1usize), t.clone());
            ActivationTrace::test_new(seed, 0, 0, 1, e)
        };
        let bank =
            estimate_vectors(&[mk(&pos1, 1), mk(&pos2, 2)], &[mk(&neg1, 1), mk(&neg2, 2)])
                .unwrap();

        // oracle: mean over 2 seeds x 2 tokens per dim, subtract, normalize
        let mean = |a: &Tensor, b: &Tensor| -> Vec<f64> {
            (0..3)
                .map(|j| {
                    let vals = [
                        a.data()[j],
                        a.data()[3 + j],
                        b.data()[j],
                        b.data()[3 + j],
                    ];
                    vals.iter().map(|&v| v as f64).sum::<f64>() / 4.0
                })
                .collect()
        };
        let hp = mean(&pos1, &pos2);
        let hn = mean(&neg1, &neg2);
        let diff: Vec<f64> = hp.iter().zip(hn.iter()).map(|(a, b)| a - b).collect();
        let norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
        let want: Vec<f64> = diff.iter().map(|v| v / norm).collect();

        let got = bank.vector(0, 1).unwrap().data();
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((*g as f64 - w).abs() < 1e-6, "got {got:?}, want {want:?}");
        }
        // raw means retained for audit
        let mp = bank.mean_pos(0, 1).unwrap().data();
        for (g, w) in mp.iter().zip(hp.iter()) {
            assert!((*g as f64 - w).abs() < 1e-6);
        }
    }

    #[test]
    fn bank_save_load_round_trip() {
        let mut rng = Rng::new(8, 0);
        let pos = trace_with(1, |_, _| randn(&mut rng, &[4, 5]).unwrap(), (1, 2), 3);
        let neg = trace_with(1, |_, _| randn(&mut rng, &[4, 5]).unwrap(), (1, 2), 3);
        let bank = estimate_vectors(&[pos], &[neg]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        bank.save(dir.path()).unwrap();
        let loaded = PathologyVectorBank::load(dir.path()).unwrap();
        assert_eq!(loaded.manifest.z, 1);
        for l in 1..=2 {
            for t in 1..=3 {
                assert!(loaded.vector(l, t).unwrap().bits_eq(bank.vector(l, t).unwrap()));
                assert!(loaded.mean_pos(l, t).unwrap().bits_eq(bank.mean_pos(l, t).unwrap()));
            }
        }
        assert!((loaded.mean_cosine(&bank).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn unit_norm_invariant_holds() {
        let mut rng = Rng::new(13, 0);
        let pos = trace_with(1, |_, _| randn(&mut rng, &[6, 7]).unwrap(), (0, 3), 5);
        let neg = trace_with(1, |_, _| randn(&mut rng, &[6, 7]).unwrap(), (0, 3), 5);
        let bank = estimate_vectors(&[pos], &[neg]).unwrap();
        for l in 0..=3 {
            for t in 1..=5 {
                let norm = l2_norm(bank.vector(l, t).unwrap().data());
                assert!((norm - 1.0).abs() < 1e-6);
            }
        }
    }
}
