//! Ancestral reverse-process sampling.

use alloc::vec::Vec;

use crate::conditioning::ConditionEmbedding;
use crate::data::NormalizationStats;
use crate::error::{bail, Result};
use crate::rng::{self, Rng, Stream};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use crate::unet::{predict_noise, DenoiserParams};

/// Current point of a reverse trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerState {
    pub y_t: Tensor,
    pub t: usize,
    /// The fresh draw used by the step that produced this state.
    pub last_noise: Option<Tensor>,
}

impl SamplerState {
    /// Pure noise at `t = T`.
    pub fn start(shape: &[usize], sched: &NoiseSchedule, rng: &mut Rng) -> Self {
        Self { y_t: rng::normal_tensor(shape, rng), t: sched.steps(), last_noise: None }
    }
}

/// Deterministic part of a reverse step:
/// (1/√α_t)·(y_t − ((1−α_t)/√(1−ᾱ_t))·ε̂).
pub fn reverse_mean(y_t: &Tensor, eps_hat: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    y_t.expect_same_shape(eps_hat)?;
    let alpha = sched.alpha(t)?;
    let coef = (1.0 - alpha) / libm::sqrt(1.0 - sched.alpha_bar(t)?);
    let root = libm::sqrt(alpha);
    y_t.zip_map(eps_hat, |y, e| (y - coef * e) / root)
}

/// y_{t−1} = mean + σ_t·z; no noise is drawn at `t = 1`.
pub fn reverse_step(state: SamplerState, eps_hat: &Tensor, sched: &NoiseSchedule, rng: &mut Rng) -> Result<SamplerState> {
    if state.t == 0 {
        bail!(State, "sampler is already at t = 0");
    }
    let mean = reverse_mean(&state.y_t, eps_hat, state.t, sched)?;
    if state.t == 1 {
        return Ok(SamplerState { y_t: mean, t: 0, last_noise: None });
    }
    let sigma = libm::sqrt(sched.posterior_variance(state.t)?);
    let z = rng::normal_tensor(state.y_t.shape(), rng);
    let y = mean.zip_map(&z, |m, z| m + sigma * z)?;
    if !y.is_finite() {
        bail!(Numeric, "non-finite sample at t = {}", state.t - 1);
    }
    Ok(SamplerState { y_t: y, t: state.t - 1, last_noise: Some(z) })
}

/// A generated signal, cropped to `(N_c, N_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BrainSignal {
    /// In the normalized space the model was trained in.
    pub normalized: Tensor,
    /// De-normalized with the training statistics; equals `normalized` when none are given.
    pub physical: Tensor,
}

/// Runs the full reverse chain for `n_samples` independent samples. Sample
/// `i` draws from its own stream of `seed`, so results do not depend on `n_samples`.
pub fn generate(
    params: &DenoiserParams,
    cond: &ConditionEmbedding,
    sched: &NoiseSchedule,
    seed: u64,
    n_samples: usize,
    stats: Option<&NormalizationStats>,
) -> Result<Vec<BrainSignal>> {
    let cfg = params.config();
    cond.expect_dim(cfg.cross_attn_dim)?;
    let pad = cfg.pad_spec();
    let shape = cfg.input_shape();
    (0..n_samples)
        .map(|i| {
            let mut rng = rng::stream(seed, Stream::Sampling, i as u64);
            let mut state = SamplerState::start(&shape, sched, &mut rng);
            while state.t > 0 {
                let eps_hat = predict_noise(&state.y_t, state.t, cond, params)?;
                state = reverse_step(state, &eps_hat, sched, &mut rng)?;
            }
            let normalized = pad.crop(&state.y_t)?;
            let physical = match stats {
                Some(s) => s.denormalize(&normalized)?,
                None => normalized.clone(),
            };
            Ok(BrainSignal { normalized, physical })
        })
        .collect()
}
