//! Linear variance schedule and the forward (noising) process.
//!
//! Time steps are 1-based: `t ∈ [1, T]`. For step `t`,
//! `α_t = 1 − β_t`, `ᾱ_t = Π_{s≤t} α_s`, and the posterior variance is
//! `σ_t² = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)` with `ᾱ_0 = 1`, so `σ_1² = 0`.

use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Parameters of a linear β schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self { steps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// Precomputed per-step coefficients of the diffusion process.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_vars: Vec<f64>,
}

impl NoiseSchedule {
    /// β linearly interpolated from `beta_start` at t = 1 to `beta_end` at t = T.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            bail!(Config, "schedule needs at least one step");
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            bail!(Config, "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]");
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut prod = 1.0;
        for a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        let posterior_vars = (0..steps)
            .map(|i| {
                if i == 0 {
                    0.0
                } else {
                    betas[i] * (1.0 - alpha_bars[i - 1]) / (1.0 - alpha_bars[i])
                }
            })
            .collect();
        Ok(Self { params: ScheduleParams { steps, beta_start, beta_end }, betas, alphas, alpha_bars, posterior_vars })
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn slot(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            bail!(Index, "time step {t} outside [1, {}]", self.steps());
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.slot(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.slot(t)?])
    }

    /// `ᾱ_t`; `ᾱ_0` is defined as 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        Ok(self.alpha_bars[self.slot(t)?])
    }

    /// `σ_t²`
    pub fn posterior_variance(&self, t: usize) -> Result<f64> {
        Ok(self.posterior_vars[self.slot(t)?])
    }

    /// Closed-form marginal: `√ᾱ_t·y0 + √(1−ᾱ_t)·eps`.
    pub fn q_sample(&self, y0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        y0.expect_same_shape(eps)?;
        let ab = self.alpha_bar(t)?;
        if t == 0 {
            bail!(Index, "time step 0 outside [1, {}]", self.steps());
        }
        let (a, b) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
        y0.zip_map(eps, |y, e| a * y + b * e)
    }

    /// One Markov step: `√(1−β_t)·y_prev + √β_t·noise`.
    pub fn forward_step(&self, y_prev: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor> {
        y_prev.expect_same_shape(noise)?;
        let beta = self.beta(t)?;
        let (a, b) = (libm::sqrt(1.0 - beta), libm::sqrt(beta));
        y_prev.zip_map(noise, |y, e| a * y + b * e)
    }
}
