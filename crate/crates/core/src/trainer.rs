//! Noise-prediction training: the diffusion loss, AdamW, and a step-wise trainer.

use alloc::vec::Vec;

use rand::Rng as _;

use crate::conditioning::ConditionEmbedding;
use crate::error::{bail, Result};
use crate::nn::{Gradients, ParamSet, Tape};
use crate::rng::{self, Rng, Stream};
use crate::schedule::{NoiseSchedule, ScheduleParams};
use crate::tensor::Tensor;
use crate::unet::DenoiserParams;

/// One training pair: a padded signal `[1×H'×W']` and its condition.
#[derive(Debug, Clone)]
pub struct Example {
    pub signal: Tensor,
    pub cond: ConditionEmbedding,
}

/// The `(t, ε)` draw for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub t: usize,
    pub eps: Tensor,
}

/// Draws `t` uniformly from `1..=T` and `ε` standard normal.
pub fn draw_noise(sched: &NoiseSchedule, shape: &[usize], rng: &mut Rng) -> NoiseDraw {
    let t = rng.random_range(1..=sched.steps());
    let eps = rng::normal_tensor(shape, rng);
    NoiseDraw { t, eps }
}

/// Diffusion loss with an arbitrary noise predictor
/// `predict(index, y_t, t, cond, eps)`; `eps` is passed so test harnesses
/// can build oracles. Returns the mean over batch and elements.
pub fn diffusion_loss_with<F>(batch: &[Example], sched: &NoiseSchedule, rng: &mut Rng, mut predict: F) -> Result<f64>
where
    F: FnMut(usize, &Tensor, usize, &ConditionEmbedding, &Tensor) -> Result<Tensor>,
{
    if batch.is_empty() {
        bail!(Data, "diffusion loss needs a non-empty batch");
    }
    let mut total = 0.0;
    for (i, ex) in batch.iter().enumerate() {
        let draw = draw_noise(sched, ex.signal.shape(), rng);
        let y_t = sched.q_sample(&ex.signal, draw.t, &draw.eps)?;
        let eps_hat = predict(i, &y_t, draw.t, &ex.cond, &draw.eps)?;
        draw.eps.expect_same_shape(&eps_hat)?;
        let loss = draw.eps.sub(&eps_hat)?.map(|v| v * v).mean();
        if !loss.is_finite() {
            bail!(Numeric, "non-finite diffusion loss for sample {i} (t = {})", draw.t);
        }
        total += loss;
    }
    Ok(total / batch.len() as f64)
}

/// Loss and parameter gradients for one batch.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grads: Gradients,
    /// Drawn time step per example.
    pub steps: Vec<usize>,
}

/// Diffusion loss of the denoiser on `batch`, with gradients.
/// Consumes the same draws from `rng` as [`diffusion_loss_with`].
pub fn diffusion_loss(params: &DenoiserParams, batch: &[Example], sched: &NoiseSchedule, rng: &mut Rng) -> Result<LossGrad> {
    if batch.is_empty() {
        bail!(Data, "diffusion loss needs a non-empty batch");
    }
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut grads = Gradients::default();
    let mut steps = Vec::with_capacity(batch.len());
    for (i, ex) in batch.iter().enumerate() {
        let draw = draw_noise(sched, ex.signal.shape(), rng);
        let y_t = sched.q_sample(&ex.signal, draw.t, &draw.eps)?;
        let mut tape = Tape::new();
        let out = params.forward(&mut tape, &y_t, draw.t, &ex.cond)?;
        let l = tape.squared_error_mean(out, &draw.eps)?;
        let value = tape.value(l).data()[0];
        if !value.is_finite() {
            bail!(Numeric, "non-finite diffusion loss for sample {i} (t = {})", draw.t);
        }
        let mut g = tape.param_gradients(l, params.params())?;
        g.scale(1.0 / n);
        grads.merge(g);
        loss += value / n;
        steps.push(draw.t);
    }
    Ok(LossGrad { loss, grads, steps })
}

/// AdamW hyperparameters; decay is decoupled from the gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self { learning_rate, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment buffers and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let m: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self { step: 0, v: m.clone(), m }
    }
}

/// One AdamW update at learning rate `lr` (callers apply warmup through it).
pub fn adamw_step(params: &mut ParamSet, grads: &Gradients, state: &mut AdamState, opt: &AdamW, lr: f64) -> Result<()> {
    if state.m.len() != params.len() {
        bail!(State, "optimizer state tracks {} parameters, model has {}", state.m.len(), params.len());
    }
    state.step += 1;
    let bc1 = 1.0 - libm::pow(opt.beta1, state.step as f64);
    let bc2 = 1.0 - libm::pow(opt.beta2, state.step as f64);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads.0.get(i).and_then(Option::as_ref);
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, w) in p.value.data_mut().iter_mut().enumerate() {
            let gk = g.map_or(0.0, |g| g.data()[k]);
            m[k] = opt.beta1 * m[k] + (1.0 - opt.beta1) * gk;
            v[k] = opt.beta2 * v[k] + (1.0 - opt.beta2) * gk * gk;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            *w -= lr * opt.weight_decay * *w;
            *w -= lr * m_hat / (libm::sqrt(v_hat) + opt.eps);
        }
    }
    Ok(())
}

/// Training hyperparameters. Clipping, EMA and warmup are off by default.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub schedule: ScheduleParams,
    /// Maximum global gradient norm.
    pub grad_clip: Option<f64>,
    /// Decay of an exponential moving average of the weights.
    pub ema_decay: Option<f64>,
    /// Linear learning-rate warmup length in steps.
    pub warmup_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            epochs: 50,
            batch_size: 16,
            seed: 0,
            schedule: ScheduleParams::default(),
            grad_clip: None,
            ema_decay: None,
            warmup_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bail!(Config, "learning_rate must be positive, got {}", self.learning_rate);
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            bail!(Config, "weight_decay must be non-negative, got {}", self.weight_decay);
        }
        if self.epochs == 0 {
            bail!(Config, "epochs must be at least 1");
        }
        if self.batch_size == 0 {
            bail!(Config, "batch_size must be at least 1");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                bail!(Config, "grad_clip must be positive, got {c}");
            }
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                bail!(Config, "ema_decay must lie in [0, 1), got {d}");
            }
        }
        self.schedule.build().map(|_| ())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW::new(self.learning_rate, self.weight_decay)
    }
}

/// One logged optimisation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: u64,
    /// Decile of the batch's median time step, 0..=9.
    pub t_bucket: u8,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    pub records: Vec<LossRecord>,
}

impl LossTrace {
    pub fn push(&mut self, record: LossRecord) -> Result<()> {
        if !record.loss.is_finite() {
            bail!(Numeric, "non-finite loss at step {}", record.step);
        }
        if let Some(last) = self.records.last() {
            if record.step <= last.step {
                bail!(State, "step counter went from {} to {}", last.step, record.step);
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Mean loss over the first `window` records.
    pub fn head_mean(&self, window: usize) -> Option<f64> {
        mean_of(self.records.iter().take(window))
    }

    /// Mean loss over the last `window` records.
    pub fn tail_mean(&self, window: usize) -> Option<f64> {
        mean_of(self.records.iter().rev().take(window))
    }
}

fn mean_of<'a>(it: impl Iterator<Item = &'a LossRecord>) -> Option<f64> {
    let (n, s) = it.fold((0usize, 0.0), |(n, s), r| (n + 1, s + r.loss));
    (n > 0).then(|| s / n as f64)
}

fn t_bucket(steps: &[usize], total: usize) -> u8 {
    let mut sorted = steps.to_vec();
    sorted.sort_unstable();
    let median = sorted[sorted.len() / 2];
    ((median - 1) * 10 / total).min(9) as u8
}

/// Holds the model, optimiser state and trace between steps.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: DenoiserParams,
    pub state: AdamState,
    pub ema: Option<ParamSet>,
    pub trace: LossTrace,
    cfg: TrainConfig,
    sched: NoiseSchedule,
    opt: AdamW,
}

impl Trainer {
    pub fn new(model: DenoiserParams, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let sched = cfg.schedule.build()?;
        let state = AdamState::new(model.params());
        let ema = cfg.ema_decay.map(|_| model.params().clone());
        let opt = cfg.optimizer();
        Ok(Self { model, state, ema, trace: LossTrace::default(), cfg, sched, opt })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn steps_done(&self) -> u64 {
        self.state.step
    }

    /// One optimisation step on `batch`; draws come from the step's own stream.
    pub fn step(&mut self, epoch: usize, batch: &[Example]) -> Result<f64> {
        let index = self.state.step;
        let mut rng = rng::stream(self.cfg.seed, Stream::Diffusion, index);
        let LossGrad { loss, mut grads, steps } = diffusion_loss(&self.model, batch, &self.sched, &mut rng)?;
        if let Some(max) = self.cfg.grad_clip {
            let norm = libm::sqrt(grads.0.iter().flatten().flat_map(|t| t.data()).map(|g| g * g).sum::<f64>());
            if norm > max {
                grads.scale(max / norm);
            }
        }
        let lr = if self.cfg.warmup_steps > 0 {
            self.cfg.learning_rate * ((index + 1) as f64 / self.cfg.warmup_steps as f64).min(1.0)
        } else {
            self.cfg.learning_rate
        };
        adamw_step(self.model.params_mut(), &grads, &mut self.state, &self.opt, lr)?;
        if let (Some(ema), Some(decay)) = (self.ema.as_mut(), self.cfg.ema_decay) {
            for (e, p) in ema.iter_mut().zip(self.model.params().iter()) {
                e.value = e.value.zip_map(&p.value, |a, b| decay * a + (1.0 - decay) * b)?;
            }
        }
        let bucket = t_bucket(&steps, self.sched.steps());
        self.trace.push(LossRecord { epoch, step: self.state.step, t_bucket: bucket, loss })?;
        Ok(loss)
    }

    /// Runs one epoch over `examples` in the seeded batch order.
    /// Returns the mean loss of the epoch.
    pub fn epoch(&mut self, epoch: usize, examples: &[Example]) -> Result<f64> {
        if examples.is_empty() {
            bail!(Data, "no training examples");
        }
        let order = crate::data::make_batches(examples.len(), self.cfg.batch_size, self.cfg.seed, epoch as u64)?;
        let mut total = 0.0;
        for idx in &order {
            let batch: Vec<Example> = idx.iter().map(|&i| examples[i].clone()).collect();
            total += self.step(epoch, &batch)?;
        }
        Ok(total / order.len() as f64)
    }

    /// Weights to checkpoint: the EMA copy when enabled.
    pub fn export_params(&self) -> Result<DenoiserParams> {
        match &self.ema {
            Some(ema) => DenoiserParams::from_named(self.model.config(), ema.iter().map(|p| (p.name.clone(), p.value.clone()))),
            None => Ok(self.model.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use alloc::format;
    use crate::unet::DenoiserConfig;

    fn scalar_set(v: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert("p", Tensor::new(&[1], alloc::vec![v]).unwrap()).unwrap();
        ps
    }

    fn grad(v: f64) -> Gradients {
        Gradients(alloc::vec![Some(Tensor::new(&[1], alloc::vec![v]).unwrap())])
    }

    #[test]
    fn adamw_zero_gradient_no_decay_is_identity() {
        let mut ps = scalar_set(0.7);
        let mut st = AdamState::new(&ps);
        let opt = AdamW::new(1e-3, 0.0);
        adamw_step(&mut ps, &grad(0.0), &mut st, &opt, opt.learning_rate).unwrap();
        assert_eq!(ps.by_name("p").unwrap().value.data()[0], 0.7);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut ps = scalar_set(1.0);
        let mut st = AdamState::new(&ps);
        let opt = AdamW::new(1e-4, 0.0);
        adamw_step(&mut ps, &grad(1.0), &mut st, &opt, opt.learning_rate).unwrap();
        let p = ps.by_name("p").unwrap().value.data()[0];
        assert!((p - (1.0 - 1e-4)).abs() < 1e-11, "{p}");
    }

    #[test]
    fn adamw_decay_is_decoupled() {
        let mut ps = scalar_set(2.0);
        let mut st = AdamState::new(&ps);
        let opt = AdamW::new(1e-2, 0.5);
        adamw_step(&mut ps, &grad(0.0), &mut st, &opt, opt.learning_rate).unwrap();
        assert!((ps.by_name("p").unwrap().value.data()[0] - 2.0 * (1.0 - 1e-2 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(matches!(TrainConfig { epochs: 0, ..Default::default() }.validate(), Err(Error::Config(_))));
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    }

    fn batch(n: usize) -> Vec<Example> {
        let mut r = rng::stream(1, Stream::Synthetic, 0);
        (0..n)
            .map(|i| Example {
                signal: rng::normal_tensor(&[1, 8, 16], &mut r),
                cond: ConditionEmbedding::new(format!("img{i}"), rng::normal_tensor(&[1, 4], &mut r)).unwrap(),
            })
            .collect()
    }

    #[test]
    fn zero_predictor_loss_is_unit_variance() {
        let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let b = batch(80);
        let mut r = rng::stream(2, Stream::Diffusion, 0);
        let loss = diffusion_loss_with(&b, &sched, &mut r, |_, y, _, _, _| Ok(Tensor::zeros(y.shape()))).unwrap();
        assert!((loss - 1.0).abs() < 0.05, "{loss}");
    }

    #[test]
    fn oracle_predictor_loss_is_zero_and_draws_are_deterministic() {
        let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let b = batch(3);
        let run = |seed| {
            let mut r = rng::stream(seed, Stream::Diffusion, 0);
            diffusion_loss_with(&b, &sched, &mut r, |_, _, _, _, eps| Ok(eps.clone())).unwrap()
        };
        assert_eq!(run(4), 0.0);
        let noisy = |seed| {
            let mut r = rng::stream(seed, Stream::Diffusion, 0);
            diffusion_loss_with(&b, &sched, &mut r, |_, y, _, _, _| Ok(y.clone())).unwrap()
        };
        assert_eq!(noisy(4).to_bits(), noisy(4).to_bits());
    }

    #[test]
    fn model_loss_matches_plain_predictor() {
        let cfg = DenoiserConfig { cross_attn_dim: 4, ..DenoiserConfig::tiny() };
        let model = DenoiserParams::randomized(&cfg, 5).unwrap();
        let sched = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let b = batch(2);
        let with_grads = diffusion_loss(&model, &b, &sched, &mut rng::stream(6, Stream::Diffusion, 0)).unwrap();
        let plain = diffusion_loss_with(&b, &sched, &mut rng::stream(6, Stream::Diffusion, 0), |_, y, t, c, _| {
            crate::unet::predict_noise(y, t, c, &model)
        })
        .unwrap();
        assert!((with_grads.loss - plain).abs() < 1e-12);
        assert_eq!(with_grads.steps.len(), 2);
    }

    #[test]
    fn empty_batch_rejected() {
        let sched = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let mut r = rng::stream(0, Stream::Diffusion, 0);
        assert!(diffusion_loss_with(&[], &sched, &mut r, |_, y, _, _, _| Ok(y.clone())).is_err());
    }

    #[test]
    fn trace_rejects_non_finite_and_non_monotone() {
        let mut tr = LossTrace::default();
        tr.push(LossRecord { epoch: 0, step: 1, t_bucket: 0, loss: 1.0 }).unwrap();
        assert!(tr.push(LossRecord { epoch: 0, step: 1, t_bucket: 0, loss: 1.0 }).is_err());
        assert!(tr.push(LossRecord { epoch: 0, step: 2, t_bucket: 0, loss: f64::NAN }).is_err());
        assert_eq!(tr.head_mean(5), Some(1.0));
    }
}
