//! Gate-score maps: collection, spatial rendering, and export.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use steerlab_nn::Tensor;

use crate::error::{LabError, Result};
use crate::img::write_pgm;

/// Per-token gate values recorded at each steered `(layer, step)` site.
#[derive(Debug, Clone)]
pub struct SigmaMapStack {
    /// Token-grid side length (tokens = grid * grid).
    pub grid: usize,
    entries: BTreeMap<(usize, usize), Vec<f32>>,
}

impl SigmaMapStack {
    pub fn new(grid: usize) -> Self {
        Self { grid, entries: BTreeMap::new() }
    }

    pub fn record(&mut self, layer: usize, step: usize, sigma: Vec<f32>) {
        self.entries.insert((layer, step), sigma);
    }

    pub fn get(&self, layer: usize, step: usize) -> Option<&Vec<f32>> {
        self.entries.get(&(layer, step))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn sites(&self) -> impl Iterator<Item = &(usize, usize)> {
        self.entries.keys()
    }

    /// Mean gate value per step, averaged over all recorded layers and
    /// tokens. Feeds the sparsity report.
    pub fn per_step_mean(&self) -> BTreeMap<usize, f32> {
        let mut sums: BTreeMap<usize, (f32, usize)> = BTreeMap::new();
        for (&(_, step), sigma) in &self.entries {
            let e = sums.entry(step).or_insert((0.0, 0));
            for &v in sigma {
                e.0 += v;
            }
            e.1 += sigma.len();
        }
        sums.into_iter().map(|(step, (s, n))| (step, s / n as f32)).collect()
    }

    fn global_min_max(&self) -> (f32, f32) {
        let mut min = f32::INFINITY;
        let mut max = f32::NEG_INFINITY;
        for sigma in self.entries.values() {
            for &v in sigma {
                min = min.min(v);
                max = max.max(v);
            }
        }
        (min, max)
    }
}

/// Sidecar index for an export: shared scale plus per-step means.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SigmaIndex {
    pub layer: usize,
    pub steps: Vec<usize>,
    pub raw_min: f32,
    pub raw_max: f32,
    pub per_step_mean: Vec<SigmaStepMean>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SigmaStepMean {
    pub step: usize,
    pub mean: f32,
}

/// Write `sigma_l{l}_t{t}.pgm` maps for one layer and a step subset, plus
/// `index.json`.
///
/// Token grids are min-max normalized over the whole stack (one shared
/// scale), then upscaled nearest-neighbor to `image_size`. An all-zero stack
/// exports all-black maps with `raw_max = 0`.
pub fn export_sigma_maps(
    stack: &SigmaMapStack,
    layer: usize,
    steps: &[usize],
    image_size: usize,
    out_dir: &Path,
) -> Result<SigmaIndex> {
    if stack.is_empty() {
        return Err(LabError::Invalid("sigma-map stack is empty".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| LabError::io(out_dir, e))?;
    let (raw_min, raw_max) = stack.global_min_max();
    let span = raw_max - raw_min;
    let grid = stack.grid;
    let upscale = image_size / grid;
    if upscale == 0 || image_size % grid != 0 {
        return Err(LabError::Invalid(format!(
            "image size {image_size} incompatible with token grid {grid}"
        )));
    }

    let mut per_step_mean = Vec::with_capacity(steps.len());
    for &step in steps {
        let sigma = stack.get(layer, step).ok_or_else(|| {
            LabError::Invalid(format!("no sigma record at layer {layer}, step {step}"))
        })?;
        let mut pixels = vec![0.0f32; image_size * image_size];
        for ty in 0..grid {
            for tx in 0..grid {
                let raw = sigma[ty * grid + tx];
                let value = if span > 0.0 { (raw - raw_min) / span } else { 0.0 };
                for py in 0..upscale {
                    for px in 0..upscale {
                        pixels[(ty * upscale + py) * image_size + tx * upscale + px] = value;
                    }
                }
            }
        }
        let map = Tensor::from_vec(vec![image_size, image_size], pixels)?;
        write_pgm(&out_dir.join(format!("sigma_l{layer}_t{step}.pgm")), &map)?;
        let mean = sigma.iter().sum::<f32>() / sigma.len() as f32;
        per_step_mean.push(SigmaStepMean { step, mean });
    }

    let index = SigmaIndex { layer, steps: steps.to_vec(), raw_min, raw_max, per_step_mean };
    let path = out_dir.join("index.json");
    let json = serde_json::to_string_pretty(&index).map_err(|e| LabError::json(&path, e))?;
    fs::write(&path, json).map_err(|e| LabError::io(&path, e))?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::img::read_pgm;

    #[test]
    fn all_zero_stack_exports_black_maps() {
        let mut stack = SigmaMapStack::new(2);
        stack.record(0, 1, vec![0.0; 4]);
        let dir = tempfile::tempdir().unwrap();
        let index = export_sigma_maps(&stack, 0, &[1], 8, dir.path()).unwrap();
        assert_eq!(index.raw_max, 0.0);
        let map = read_pgm(&dir.path().join("sigma_l0_t1.pgm")).unwrap();
        assert!(map.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_hot_token_lights_one_block() {
        let mut stack = SigmaMapStack::new(2);
        stack.record(1, 3, vec![0.0, 2.0, 0.0, 0.0]);
        let dir = tempfile::tempdir().unwrap();
        export_sigma_maps(&stack, 1, &[3], 4, dir.path()).unwrap();
        let map = read_pgm(&dir.path().join("sigma_l1_t3.pgm")).unwrap();
        // token (0,1) covers the 2x2 block at x in 2..4, y in 0..2
        for y in 0..4 {
            for x in 0..4 {
                let expect_bright = y < 2 && x >= 2;
                assert_eq!(map.data()[y * 4 + x] == 1.0, expect_bright, "({x},{y})");
            }
        }
    }

    #[test]
    fn shared_scale_across_steps() {
        let mut stack = SigmaMapStack::new(1);
        stack.record(0, 1, vec![4.0]);
        stack.record(0, 2, vec![1.0]);
        let dir = tempfile::tempdir().unwrap();
        let index = export_sigma_maps(&stack, 0, &[1, 2], 2, dir.path()).unwrap();
        assert_eq!(index.raw_min, 1.0);
        assert_eq!(index.raw_max, 4.0);
        let bright = read_pgm(&dir.path().join("sigma_l0_t1.pgm")).unwrap();
        let dark = read_pgm(&dir.path().join("sigma_l0_t2.pgm")).unwrap();
        assert_eq!(bright.data()[0], 1.0);
        assert_eq!(dark.data()[0], 0.0);
    }

    #[test]
    fn per_step_mean_aggregates_layers() {
        let mut stack = SigmaMapStack::new(2);
        stack.record(0, 1, vec![1.0, 1.0, 1.0, 1.0]);
        stack.record(1, 1, vec![3.0, 3.0, 3.0, 3.0]);
        stack.record(0, 2, vec![0.0, 0.0, 0.0, 4.0]);
        let means = stack.per_step_mean();
        assert_eq!(means[&1], 2.0);
        assert_eq!(means[&2], 1.0);
    }

    #[test]
    fn missing_site_is_an_error() {
        let mut stack = SigmaMapStack::new(2);
        stack.record(0, 1, vec![0.0; 4]);
        let dir = tempfile::tempdir().unwrap();
        assert!(export_sigma_maps(&stack, 0, &[2], 8, dir.path()).is_err());
        let empty = SigmaMapStack::new(2);
        assert!(export_sigma_maps(&empty, 0, &[1], 8, dir.path()).is_err());
    }
}
