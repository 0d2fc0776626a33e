//! The gated per-token update and its interceptor.

use serde::{Deserialize, Serialize};
use steerlab_nn::Tensor;

use crate::dit::{CaInterceptor, HookSite};
use crate::error::{LabError, Result};

use super::estimate::PathologyVectorBank;
use super::sigma::SigmaMapStack;
use super::{dot, l2_norm};

/// Steering direction: remove the concept, or add it by negating every
/// direction vector exactly (equivalent to swapping the prompt roles).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SteerMode {
    Remove,
    Add,
}

/// Strength, layer window, step subset, and direction of an intervention.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteerConfig {
    pub alpha: f32,
    pub layer_start: usize,
    /// Inclusive.
    pub layer_end: usize,
    /// Sampler steps to steer, 1-based; `None` means every step.
    pub steps: Option<Vec<usize>>,
    pub mode: SteerMode,
}

impl SteerConfig {
    pub fn remove(alpha: f32, layer_start: usize, layer_end: usize) -> Self {
        Self { alpha, layer_start, layer_end, steps: None, mode: SteerMode::Remove }
    }

    pub fn validate(&self, n_layers: usize, t_sample: usize) -> Result<()> {
        if self.alpha < 0.0 || !self.alpha.is_finite() {
            return Err(LabError::Config(format!("alpha {} must be nonnegative", self.alpha)));
        }
        if self.layer_start > self.layer_end || self.layer_end >= n_layers {
            return Err(LabError::Config(format!(
                "layer window {}..={} outside [0, {n_layers})",
                self.layer_start, self.layer_end
            )));
        }
        if let Some(steps) = &self.steps {
            if steps.is_empty() {
                return Err(LabError::Config("step set must be nonempty".into()));
            }
            for &t in steps {
                if t < 1 || t > t_sample {
                    return Err(LabError::Config(format!(
                        "step {t} outside [1, {t_sample}]"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Resolved, sorted step set.
    pub fn step_set(&self, t_sample: usize) -> Vec<usize> {
        match &self.steps {
            None => (1..=t_sample).collect(),
            Some(steps) => {
                let mut s = steps.clone();
                s.sort_unstable();
                s.dedup();
                s
            }
        }
    }

    fn applies(&self, site: HookSite, t_sample: usize) -> bool {
        (self.layer_start..=self.layer_end).contains(&site.layer)
            && match &self.steps {
                None => site.step >= 1 && site.step <= t_sample,
                Some(steps) => steps.contains(&site.step),
            }
    }
}

/// Gated subtraction over all tokens of one site.
///
/// Per token `i`: `sigma_i = max(<h_i, v>, 0)` and
/// `h'_i = h_i - alpha * sigma_i * v`. The gate is deliberately an
/// unnormalized dot product, so tokens expressing the concept more strongly
/// are steered proportionally harder; non-aligned tokens pass through
/// bit-unchanged. Returns the new activations and the per-token gate values.
pub fn ssps_apply(h: &Tensor, v: &Tensor, alpha: f32) -> Result<(Tensor, Vec<f32>)> {
    let (tokens, d) = h.dims2()?;
    if v.shape() != [d] {
        return Err(LabError::Invalid(format!(
            "direction shape {:?} against activations {:?}",
            v.shape(),
            h.shape()
        )));
    }
    let norm = l2_norm(v.data());
    if (norm - 1.0).abs() > 1e-6 {
        return Err(LabError::Invalid(format!("direction must be unit norm, got {norm}")));
    }
    let hd = h.data();
    let vd = v.data();
    let mut out = Vec::with_capacity(tokens * d);
    let mut sigma = Vec::with_capacity(tokens);
    for tok in 0..tokens {
        let row = &hd[tok * d..(tok + 1) * d];
        let s = dot(row, vd).max(0.0);
        sigma.push(s);
        let coeff = alpha * s;
        if coeff == 0.0 {
            // closed gate (or alpha = 0): the token passes through verbatim
            out.extend_from_slice(row);
        } else {
            for j in 0..d {
                out.push(row[j] - coeff * vd[j]);
            }
        }
    }
    Ok((Tensor::from_vec(vec![tokens, d], out)?, sigma))
}

/// Steering hook: applies [`ssps_apply`] at every configured site, recording
/// gate values for the sigma-map stack.
pub struct SspsInterceptor<'a> {
    bank: &'a PathologyVectorBank,
    config: SteerConfig,
    t_sample: usize,
    sigma: SigmaMapStack,
}

impl<'a> SspsInterceptor<'a> {
    pub fn new(
        bank: &'a PathologyVectorBank,
        config: SteerConfig,
        n_layers: usize,
        t_sample: usize,
        grid: usize,
    ) -> Result<Self> {
        config.validate(n_layers, t_sample)?;
        let steps = config.step_set(t_sample);
        if !bank.covers(config.layer_start, config.layer_end, &steps) {
            return Err(LabError::BankMismatch(format!(
                "bank layers {}..={} steps 1..={} vs config layers {}..={} steps {:?}",
                bank.manifest.layer_start,
                bank.manifest.layer_end,
                bank.manifest.t_sample,
                config.layer_start,
                config.layer_end,
                steps
            )));
        }
        Ok(Self { bank, config, t_sample, sigma: SigmaMapStack::new(grid) })
    }

    pub fn into_sigma(self) -> SigmaMapStack {
        self.sigma
    }
}

impl<'a> CaInterceptor for SspsInterceptor<'a> {
    fn intercept(&mut self, site: HookSite, ca_out: Tensor) -> Result<Tensor> {
        if !self.config.applies(site, self.t_sample) {
            return Ok(ca_out);
        }
        let v = self
            .bank
            .vector(site.layer, site.step)
            .ok_or_else(|| {
                LabError::BankMismatch(format!("no vector at ({}, {})", site.layer, site.step))
            })?;
        let direction = match self.config.mode {
            SteerMode::Remove => v.clone(),
            SteerMode::Add => {
                let negated: Vec<f32> = v.data().iter().map(|&x| -x).collect();
                Tensor::from_vec(v.shape().to_vec(), negated)?
            }
        };
        let (steered, sigma) = ssps_apply(&ca_out, &direction, self.config.alpha)?;
        self.sigma.record(site.layer, site.step, sigma);
        Ok(steered)
    }
}
