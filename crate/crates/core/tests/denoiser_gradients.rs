use neurogen_core::nn::{finite_diff_check, Gradients, ParamSet};
use neurogen_core::rng::{self, Stream};
use neurogen_core::trainer::{diffusion_loss, Example};
use neurogen_core::{ConditionEmbedding, DenoiserConfig, DenoiserParams, FusionMode, NoiseSchedule, Result};

fn check(fusion: FusionMode) -> f64 {
    let cfg = DenoiserConfig { fusion, ..DenoiserConfig::tiny() };
    let model = DenoiserParams::randomized(&cfg, 3).unwrap();
    let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let mut r = rng::stream(5, Stream::Synthetic, 0);
    let batch: Vec<Example> = (0..2)
        .map(|i| Example {
            signal: rng::normal_tensor(&cfg.input_shape(), &mut r),
            cond: ConditionEmbedding::new(format!("img{i}"), rng::normal_tensor(&[2, 768], &mut r)).unwrap(),
        })
        .collect();
    let objective = |ps: &ParamSet| -> Result<(f64, Gradients)> {
        let m = DenoiserParams::from_named(&cfg, ps.iter().map(|p| (p.name.clone(), p.value.clone())))?;
        // fixed draws: every evaluation sees the same (t, ε)
        let out = diffusion_loss(&m, &batch, &sched, &mut rng::stream(11, Stream::Diffusion, 0))?;
        Ok((out.loss, out.grads))
    };
    let mut ps = model.params().clone();
    let report = finite_diff_check(&mut ps, 1e-4, 120, 13, objective).unwrap();
    assert_eq!(report.checked, 120);
    assert_eq!(&ps, model.params());
    report.max_relative_error
}

#[test]
fn cross_attention_denoiser_gradients() {
    let err = check(FusionMode::CrossAttention);
    assert!(err < 1e-3, "{err}");
}

#[test]
fn addition_denoiser_gradients() {
    let err = check(FusionMode::Addition);
    assert!(err < 1e-3, "{err}");
}

#[test]
fn concatenation_denoiser_gradients() {
    let err = check(FusionMode::Concatenation);
    assert!(err < 1e-3, "{err}");
}
