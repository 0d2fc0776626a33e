//! Linear beta schedule and the DDIM step subsequence.

use crate::error::{LabError, Result};

/// Noise schedule: betas linearly spaced in `[1e-4, 0.02]` over the training
/// timesteps, with cumulative-product alpha-bars and a strictly decreasing
/// DDIM subsequence (both endpoints included).
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    pub betas: Vec<f32>,
    pub alphas: Vec<f32>,
    pub alpha_bars: Vec<f32>,
    /// Training timesteps visited by the sampler, noisiest first.
    pub ddim_steps: Vec<usize>,
}

const BETA_START: f64 = 1e-4;
const BETA_END: f64 = 0.02;

impl DiffusionSchedule {
    pub fn new(t_train: usize, t_sample: usize) -> Result<Self> {
        if t_train < 2 || t_sample == 0 || t_sample > t_train {
            return Err(LabError::Config(format!(
                "bad schedule: t_train {t_train}, t_sample {t_sample}"
            )));
        }
        let mut betas = Vec::with_capacity(t_train);
        let mut alphas = Vec::with_capacity(t_train);
        let mut alpha_bars = Vec::with_capacity(t_train);
        let mut bar = 1.0f64;
        for t in 0..t_train {
            let beta = BETA_START + (BETA_END - BETA_START) * t as f64 / (t_train - 1) as f64;
            let alpha = 1.0 - beta;
            bar *= alpha;
            betas.push(beta as f32);
            alphas.push(alpha as f32);
            alpha_bars.push(bar as f32);
        }

        let mut ddim_steps = Vec::with_capacity(t_sample);
        if t_sample == 1 {
            ddim_steps.push(t_train - 1);
        } else {
            for k in 0..t_sample {
                let pos = (t_train - 1) as f64
                    - (t_train - 1) as f64 * k as f64 / (t_sample - 1) as f64;
                ddim_steps.push(pos.round() as usize);
            }
        }
        for w in ddim_steps.windows(2) {
            if w[1] >= w[0] {
                return Err(LabError::Config(format!(
                    "ddim subsequence not strictly decreasing: {ddim_steps:?}"
                )));
            }
        }
        Ok(Self { betas, alphas, alpha_bars, ddim_steps })
    }

    pub fn t_sample(&self) -> usize {
        self.ddim_steps.len()
    }

    /// Alpha-bar of the step after position `k` in the subsequence; 1.0 past
    /// the end (the final update lands on the clean-image prediction).
    pub fn alpha_bar_next(&self, k: usize) -> f32 {
        match self.ddim_steps.get(k + 1) {
            Some(&t) => self.alpha_bars[t],
            None => 1.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_bars_strictly_decrease() {
        let s = DiffusionSchedule::new(200, 20).unwrap();
        for w in s.alpha_bars.windows(2) {
            assert!(w[1] < w[0]);
        }
        assert!((s.betas[0] - 1e-4).abs() < 1e-9);
        assert!((s.betas[199] - 0.02).abs() < 1e-9);
    }

    #[test]
    fn ddim_subsequence_includes_endpoints() {
        let s = DiffusionSchedule::new(200, 20).unwrap();
        assert_eq!(s.ddim_steps.len(), 20);
        assert_eq!(s.ddim_steps[0], 199);
        assert_eq!(*s.ddim_steps.last().unwrap(), 0);
        for w in s.ddim_steps.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn full_length_subsequence_is_every_step() {
        let s = DiffusionSchedule::new(10, 10).unwrap();
        assert_eq!(s.ddim_steps, vec![9, 8, 7, 6, 5, 4, 3, 2, 1, 0]);
    }

    #[test]
    fn rejects_oversampled_schedule() {
        assert!(DiffusionSchedule::new(10, 11).is_err());
    }
}
