//! End-to-end acceptance checks. Each test writes one `PASS`/`FAIL` line to
//! the process stderr (not captured by the harness) before asserting.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use neurogen::montage::builtin;
use neurogen_core::conditioning::cross_attention_detailed;
use neurogen_core::embedding::synthetic_embedding;
use neurogen_core::metrics::{fmt3, mse, pcc, CrossSubjectMatrix, MetricReport};
use neurogen_core::nn::{affine_map, finite_diff_check, softmax_rows, Gradients, ParamSet};
use neurogen_core::rng::{self, Stream};
use neurogen_core::sampler::generate;
use neurogen_core::topo::{comparison, interpolate_scalp, TopoParams};
use neurogen_core::trainer::{diffusion_loss, diffusion_loss_with, Example, TrainConfig, Trainer};
use neurogen_core::unet::predict_noise;
use neurogen_core::{
    ConditionEmbedding, CrossAttentionWeights, DenoiserConfig, DenoiserParams, FusionMode, NoiseSchedule,
    ScheduleParams, Tensor,
};

fn report(name: &str, pass: bool, detail: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "acceptance {name:<22} {verdict}  {detail}");
    assert!(pass, "{name}: {detail}");
}

fn stream(index: u64) -> rng::Rng {
    rng::stream(2024, Stream::Synthetic, index)
}

fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
}

/// Residual mean (in units of the marginal deviation) and variance ratio of
/// `y_t − √ᾱ_t·y_0` against the closed-form marginal.
fn moments(y_t: &Tensor, y0: &Tensor, ab: f64) -> (f64, f64) {
    let r = y_t.zip_map(y0, |y, x| y - ab.sqrt() * x).unwrap();
    let m = r.mean();
    let var = r.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (r.len() - 1) as f64;
    (m.abs() / (1.0 - ab).sqrt(), var / (1.0 - ab))
}

#[test]
fn schedule_consistency() {
    let start = Instant::now();
    let s = schedule();
    // 10⁴ trajectories of an 8-element signal each
    let y0 = rng::normal_tensor(&[10_000, 8], &mut stream(1));
    let mut y = y0.clone();
    let mut noise_rng = stream(2);
    let mut worst: f64 = 0.0;
    let mut details = Vec::new();
    for t in 1..=1000 {
        y = s.forward_step(&y, t, &rng::normal_tensor(y.shape(), &mut noise_rng)).unwrap();
        if [1, 100, 1000].contains(&t) {
            let ab = s.alpha_bar(t).unwrap();
            let q = s.q_sample(&y0, t, &rng::normal_tensor(y.shape(), &mut stream(100 + t as u64))).unwrap();
            let (m_iter, v_iter) = moments(&y, &y0, ab);
            let (m_q, v_q) = moments(&q, &y0, ab);
            let err = [m_iter, (v_iter - 1.0).abs(), m_q, (v_q - 1.0).abs(), (v_iter - v_q).abs()].into_iter().fold(0.0, f64::max);
            worst = worst.max(err);
            details.push(format!("t={t}: var ratio {v_iter:.4}/{v_q:.4}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        "schedule-consistency",
        worst < 0.02 && secs < 30.0,
        format!("max relative deviation {worst:.4} (< 0.02), {}, {secs:.1} s", details.join(", ")),
    );
}

#[test]
fn gradient_check() {
    let start = Instant::now();
    let cfg = DenoiserConfig::tiny();
    assert_eq!((cfg.level_channels.as_slice(), cfg.sample_shape, cfg.heads), (&[8, 8, 8, 8][..], (8, 16), 1));
    let model = DenoiserParams::randomized(&cfg, 3).unwrap();
    let sched = schedule();
    let mut r = stream(3);
    let batch: Vec<Example> = (0..2)
        .map(|i| Example {
            signal: rng::normal_tensor(&cfg.input_shape(), &mut r),
            cond: ConditionEmbedding::new(format!("img{i}"), rng::normal_tensor(&[2, 768], &mut r)).unwrap(),
        })
        .collect();
    let objective = |ps: &ParamSet| -> neurogen_core::Result<(f64, Gradients)> {
        let m = DenoiserParams::from_named(&cfg, ps.iter().map(|p| (p.name.clone(), p.value.clone())))?;
        let out = diffusion_loss(&m, &batch, &sched, &mut rng::stream(11, Stream::Diffusion, 0))?;
        Ok((out.loss, out.grads))
    };
    let mut ps = model.params().clone();
    let rep = finite_diff_check(&mut ps, 1e-4, 120, 13, objective).unwrap();
    let secs = start.elapsed().as_secs_f64();
    report(
        "gradient-check",
        rep.checked >= 100 && rep.max_relative_error < 1e-3 && secs < 300.0,
        format!("{} parameters, max relative error {:.2e} (< 1e-3), {secs:.1} s", rep.checked, rep.max_relative_error),
    );
}

#[test]
fn zero_network_loss() {
    let cfg = DenoiserConfig::tiny();
    let shape = cfg.input_shape();
    let mut r = stream(4);
    let batch: Vec<Example> = (0..100)
        .map(|i| Example {
            signal: rng::normal_tensor(&shape, &mut r),
            cond: ConditionEmbedding::from_vector(format!("img{i}"), vec![0.0; 4]).unwrap(),
        })
        .collect();
    let elements = batch.len() * shape.iter().product::<usize>();
    let loss = diffusion_loss_with(&batch, &schedule(), &mut stream(5), |_, y, _, _, _| Ok(Tensor::zeros(y.shape()))).unwrap();
    report("zero-network-loss", elements >= 10_000 && (loss - 1.0).abs() < 0.05, format!("loss {loss:.4} over {elements} elements (1 ± 0.05)"));
}

#[test]
fn overfit_memorization() {
    let start = Instant::now();
    let seed = 3;
    let cfg = DenoiserConfig::tiny();
    let (c, t) = cfg.sample_shape;
    let pad = cfg.pad_spec();
    let map = rng::normal_tensor(&[c * t, cfg.cross_attn_dim], &mut stream(6));
    let mut targets = Vec::new();
    let examples: Vec<Example> = (0..8)
        .map(|i| {
            let id = format!("img{i}");
            let e = synthetic_embedding(seed, &id, cfg.cross_attn_dim);
            let y: Vec<f64> = (0..c * t).map(|k| map.row(k).iter().zip(&e).map(|(w, x)| w * x).sum()).collect();
            let y = Tensor::new(&[c, t], y).unwrap();
            targets.push(y.clone());
            Example { signal: pad.pad(&y).unwrap(), cond: ConditionEmbedding::from_vector(id, e).unwrap() }
        })
        .collect();
    let tc = TrainConfig {
        learning_rate: 5e-3,
        weight_decay: 0.0,
        epochs: 500,
        batch_size: 8,
        seed,
        schedule: ScheduleParams { steps: 300, ..ScheduleParams::default() },
        grad_clip: Some(1.0),
        ema_decay: None,
        warmup_steps: 100,
    };
    let mut trainer = Trainer::new(DenoiserParams::init(&cfg, seed).unwrap(), tc).unwrap();
    for epoch in 1..=500 {
        trainer.epoch(epoch, &examples).unwrap();
    }
    let (first, last) = (trainer.trace.head_mean(20).unwrap(), trainer.trace.tail_mean(20).unwrap());
    let ratio = last / first;
    let model = trainer.export_params().unwrap();
    let sched = trainer.schedule().clone();
    let pccs: Vec<f64> = std::thread::scope(|s| {
        let handles: Vec<_> = examples
            .iter()
            .zip(&targets)
            .enumerate()
            .map(|(i, (ex, y))| {
                let (model, sched) = (&model, &sched);
                s.spawn(move || {
                    let gens = generate(model, &ex.cond, sched, 1000 + i as u64, 16, None).unwrap();
                    let avg = gens.iter().skip(1).fold(gens[0].normalized.clone(), |a, g| a.add(&g.normalized).unwrap()).scale(1.0 / 16.0);
                    pcc(&avg, y).unwrap()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mean_pcc = pccs.iter().sum::<f64>() / pccs.len() as f64;
    let secs = start.elapsed().as_secs_f64();
    report(
        "overfit",
        ratio < 0.3 && mean_pcc > 0.5 && secs < 600.0,
        format!("running loss {first:.4} -> {last:.4}, ratio {ratio:.3} (< 0.3), mean PCC {mean_pcc:.3} (> 0.5), {secs:.1} s"),
    );
}

fn random_weights(r: &mut rng::Rng, d_model: usize, cond: usize, d_attn: usize, heads: usize) -> CrossAttentionWeights {
    CrossAttentionWeights {
        w_q: rng::normal_tensor(&[d_model, d_attn], r),
        w_k: rng::normal_tensor(&[cond, d_attn], r),
        w_v: rng::normal_tensor(&[cond, d_attn], r),
        w_out: rng::normal_tensor(&[d_attn, d_model], r),
        b_out: rng::normal_tensor(&[d_model], r),
        heads,
    }
}

#[test]
fn attention_properties() {
    let mut r = stream(7);
    let (mut row_err, mut single_exact, mut perm_err, mut convex_ok): (f64, bool, f64, usize) = (0.0, true, 0.0, 0);
    for _ in 0..100 {
        let p = softmax_rows(&rng::normal_tensor(&[5, 9], &mut r).scale(30.0)).unwrap();
        for i in 0..5 {
            row_err = row_err.max((p.row(i).iter().sum::<f64>() - 1.0).abs());
        }

        let w = random_weights(&mut r, 4, 6, 6, 1);
        let h = rng::normal_tensor(&[3, 4], &mut r);
        let one = ConditionEmbedding::new("a", rng::normal_tensor(&[1, 6], &mut r)).unwrap();
        let res = cross_attention_detailed(&h, &one, &w).unwrap();
        let v = affine_map(one.tokens(), &w.w_v, &Tensor::zeros(&[6])).unwrap();
        single_exact &= (0..3).all(|i| res.pre_projection.row(i) == v.row(0));

        let tokens = rng::normal_tensor(&[4, 6], &mut r);
        let w2 = random_weights(&mut r, 4, 6, 6, 2);
        let a = ConditionEmbedding::new("a", tokens.clone()).unwrap();
        let rows: Vec<&[f64]> = [2, 0, 3, 1].iter().map(|&i| tokens.row(i)).collect();
        let b = ConditionEmbedding::new("a", Tensor::from_rows(&rows).unwrap()).unwrap();
        let d = cross_attention_detailed(&h, &a, &w2).unwrap().output.sub(&cross_attention_detailed(&h, &b, &w2).unwrap().output).unwrap();
        perm_err = perm_err.max(d.max_abs());

        let res = cross_attention_detailed(&h, &a, &w).unwrap();
        let v = affine_map(&tokens, &w.w_v, &Tensor::zeros(&[6])).unwrap();
        let convex = (0..6).all(|j| {
            let col: Vec<f64> = (0..4).map(|i| v.get2(i, j)).collect();
            let (lo, hi) = col.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
            (0..3).all(|i| (lo - 1e-9..=hi + 1e-9).contains(&res.pre_projection.get2(i, j)))
        });
        convex_ok += convex as usize;
    }
    report(
        "attention",
        row_err < 1e-6 && single_exact && perm_err < 1e-6 && convex_ok == 100,
        format!("row-sum error {row_err:.1e}, single key exact {single_exact}, permutation error {perm_err:.1e}, convex {convex_ok}/100"),
    );
}

fn neurogen(cwd: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_neurogen")).current_dir(cwd).env_remove("NEUROGEN_RUN_ROOT").args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn files_under(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn determinism() {
    let d = tempfile::tempdir().unwrap();
    neurogen(d.path(), &["synth-data", "--out", "data", "--subjects", "1", "--trials", "16", "--dim", "32"]);
    for run in ["a", "b"] {
        let set = format!("output_dir=\"{run}\"");
        for cmd in ["train", "generate"] {
            neurogen(d.path(), &["-c", "data/config.toml", "--set", &set, "--set", "schedule.steps=60", cmd]);
        }
    }
    let (a, b) = (d.path().join("data/a"), d.path().join("data/b"));
    let fa: Vec<_> = files_under(&a).into_iter().filter(|p| p.file_name().unwrap() != "resolved-config.toml").collect();
    let mut same = !fa.is_empty();
    let mut compared = 0;
    for p in &fa {
        let q = b.join(p.strip_prefix(&a).unwrap());
        same &= fs::read(p).unwrap() == fs::read(&q).unwrap_or_default();
        compared += 1;
    }
    let has = |s: &str| fa.iter().any(|p| p.to_string_lossy().ends_with(s));
    same &= has("final.ckpt") && has("generated/trials.f32");
    report("determinism", same, format!("{compared} checkpoint/output files byte-identical across two runs: {same}"));
}

#[test]
fn table_aggregation() {
    let within = |mse: &[f64], pcc: &[f64]| {
        let mut r = MetricReport::default();
        for (i, (m, p)) in mse.iter().zip(pcc).enumerate() {
            r.push(format!("{}", i + 1), *m, *p);
        }
        (fmt3(r.mse_average()), fmt3(r.pcc_average()))
    };
    let eeg = within(
        &[0.178, 0.212, 0.189, 0.225, 0.269, 0.247, 0.213, 0.200, 0.204, 0.234],
        &[0.228, 0.191, 0.216, 0.173, 0.139, 0.159, 0.186, 0.231, 0.140, 0.213],
    );
    let meg = within(&[0.607, 0.856, 0.964, 0.623], &[0.128, 0.198, 0.061, 0.099]);
    let rows: [&[f64]; 10] = [
        &[0.204, 0.191, 0.202, 0.195, 0.193, 0.192, 0.193, 0.193, 0.195],
        &[0.216, 0.217, 0.220, 0.218, 0.213, 0.221, 0.215, 0.213, 0.220],
        &[0.206, 0.220, 0.216, 0.203, 0.204, 0.215, 0.210, 0.205, 0.209],
        &[0.231, 0.241, 0.229, 0.229, 0.230, 0.233, 0.230, 0.224, 0.237],
        &[0.285, 0.296, 0.279, 0.288, 0.279, 0.289, 0.280, 0.278, 0.288],
        &[0.270, 0.280, 0.266, 0.275, 0.263, 0.270, 0.265, 0.259, 0.270],
        &[0.224, 0.240, 0.229, 0.230, 0.226, 0.224, 0.227, 0.217, 0.233],
        &[0.217, 0.225, 0.217, 0.225, 0.214, 0.209, 0.219, 0.215, 0.221],
        &[0.224, 0.235, 0.223, 0.228, 0.222, 0.216, 0.221, 0.225, 0.230],
        &[0.243, 0.253, 0.239, 0.253, 0.244, 0.242, 0.251, 0.245, 0.244],
    ];
    let m = CrossSubjectMatrix::from_off_diagonal((1..=10).map(|i| i.to_string()).collect(), &rows).unwrap();
    let (src_mean, src_std) = m.source_stats(0);
    let cross = (fmt3(src_mean), fmt3(src_std), fmt3(m.target_stats(0).0));
    let got = [eeg.0, eeg.1, cross.0, cross.1, cross.2, meg.0, meg.1];
    let want = ["0.217", "0.188", "0.195", "0.005", "0.235", "0.763", "0.122"];
    report("table-aggregation", got == want, format!("{}", got.join(" ")));
}

#[test]
fn metric_properties() {
    let mut r = stream(8);
    let mut affine_err: f64 = 0.0;
    let mut translation_exact = true;
    let mut self_err: f64 = 0.0;
    for i in 0..200 {
        let x = rng::normal_tensor(&[4, 16], &mut r);
        let y = rng::normal_tensor(&[4, 16], &mut r);
        let a = 0.01 + 50.0 * rng::standard_normal(&mut r).abs();
        let b = 10.0 * rng::standard_normal(&mut r);
        affine_err = affine_err.max((pcc(&x.map(|v| a * v + b), &y).unwrap() - pcc(&x, &y).unwrap()).abs());
        self_err = self_err.max((pcc(&x, &x).unwrap() - 1.0).abs()).max((pcc(&x, &x.scale(-1.0)).unwrap() + 1.0).abs());
        // dyadic values: the shifted difference is computed without rounding
        let dy = |t: &Tensor| t.map(|v| (v * 1024.0).round() / 1024.0);
        let (xd, yd) = (dy(&x), dy(&y));
        let c = (i as f64 - 100.0) / 64.0;
        translation_exact &= mse(&xd.map(|v| v + c), &yd.map(|v| v + c)).unwrap() == mse(&xd, &yd).unwrap();
    }
    let hand = pcc(&Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap(), &Tensor::new(&[3], vec![1.0, 2.0, 4.0]).unwrap()).unwrap();
    report(
        "metric-properties",
        affine_err < 1e-9 && self_err < 1e-12 && translation_exact && (hand - 0.98198).abs() < 1e-5,
        format!("affine error {affine_err:.1e}, self/negation error {self_err:.1e}, translation exact {translation_exact}, pcc([1,2,3],[1,2,4]) = {hand:.5}"),
    );
}

fn reduced(base: DenoiserConfig) -> DenoiserConfig {
    DenoiserConfig { level_channels: vec![8, 8, 16, 16], ..base }
}

#[test]
fn preset_shapes() {
    let sched = NoiseSchedule::linear(2, 1e-4, 0.02).unwrap();
    let mut lines = Vec::new();
    let mut ok = true;
    for (name, base, padded) in [("eeg", DenoiserConfig::eeg(), [1, 64, 256]), ("meg", DenoiserConfig::meg(), [1, 272, 200])] {
        let (c, t) = base.sample_shape;
        ok &= base.input_shape() == padded;
        for fusion in FusionMode::ALL {
            let cfg = DenoiserConfig { fusion, ..reduced(base.clone()) };
            let model = DenoiserParams::randomized(&cfg, 1).unwrap();
            let cond = ConditionEmbedding::from_vector("img", synthetic_embedding(0, "img", 768)).unwrap();
            let eps = predict_noise(&Tensor::zeros(&cfg.input_shape()), 1, &cond, &model).unwrap();
            let out = generate(&model, &cond, &sched, 0, 1, None).unwrap();
            ok &= cfg.input_shape() == padded && eps.shape() == padded && out[0].physical.shape() == [c, t];
        }
        lines.push(format!("{name} ({c},{t})->({},{})->({c},{t})", padded[1], padded[2]));
    }
    report("shapes", ok, format!("{}, all fusion modes", lines.join(", ")));
}

#[test]
fn topography() {
    let montage = builtin("eeg-63").unwrap();
    let x = rng::normal_tensor(&[63, 250], &mut stream(9));
    let p = TopoParams { window_ms: 100.0, rate_hz: 250.0, grid_res: 64, onset_ms: 0.0 };
    let rows = comparison(&x, &x, &x, &montage, &p).unwrap();
    let diff_zero = rows[3].frames.iter().all(|f| f.channel_values.iter().all(|&v| v == 0.0) && f.grid.in_disk().all(|v| v == 0.0));
    let counts: Vec<usize> = rows.iter().map(|r| r.frames.len()).collect();
    let grid = interpolate_scalp(&[3.7; 63], &montage, 64).unwrap();
    let const_err = grid.in_disk().map(|v| (v - 3.7).abs()).fold(0.0, f64::max);
    report(
        "topography",
        diff_zero && const_err < 1e-9 && counts.iter().all(|&n| n == 10),
        format!("difference all zero {diff_zero}, constant-field error {const_err:.1e}, frames per row {counts:?}"),
    );
}

#[test]
fn strategy_comparison() {
    let d = tempfile::tempdir().unwrap();
    neurogen(d.path(), &["synth-data", "--out", "data", "--subjects", "1", "--trials", "16", "--dim", "32"]);
    neurogen(d.path(), &["-c", "data/config.toml", "--set", "schedule.steps=40", "--set", "train.epochs=1", "compare-fusion"]);
    let csv = fs::read_to_string(d.path().join("data/run/reports/synthetic_fusion-comparison.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().skip(1).collect();
    let methods: std::collections::BTreeSet<&str> = lines.iter().map(|l| l.split(',').next().unwrap()).collect();
    let finite = lines.iter().all(|l| l.split(',').skip(2).all(|v| v.parse::<f64>().is_ok_and(f64::is_finite)));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.path().join("data/run/reports/synthetic_fusion-comparison.json")).unwrap()).unwrap();
    let rows = json["rows"].as_array().map_or(0, Vec::len);
    report(
        "strategy-comparison",
        methods.len() == 3 && rows == 3 && finite,
        format!("{} methods ({}), finite {finite}", methods.len(), methods.into_iter().collect::<Vec<_>>().join(", ")),
    );
}
