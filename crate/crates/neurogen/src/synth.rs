//! Deterministic synthetic datasets for tests and demos.
//!
//! Each image id gets a unit embedding `e`. Its clean response is
//! `Σ_j (W e)_j · s_j ⊗ b_j` where `W` is a fixed `k × dim` Gaussian map,
//! `s_j` a spatial pattern and `b_j` a windowed oscillation over the epoch.
//! Subjects share the patterns but differ in gain and per-channel offset;
//! each trial adds white noise. A quarter of the images form the test split.

use std::fs;
use std::path::{Path, PathBuf};

use neurogen_core::embedding::{stable_hash, synthetic_embedding, EmbeddingIndex};
use neurogen_core::rng::{self, Stream};
use neurogen_core::Tensor;

use crate::archive::{Archive, ArchiveInfo, ArchiveWriter, TEST, TRAIN};
use crate::config::RunConfig;
use crate::embeddings::write_embeddings;
use crate::error::{Error, Result};
use crate::montage::{spread_montage, write_montage};

const COMPONENTS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    /// Trials per subject.
    pub trials: usize,
    pub channels: usize,
    pub timepoints: usize,
    pub subjects: usize,
    /// Distinct images; defaults to a quarter of the trials.
    pub images: Option<usize>,
    pub dim: usize,
    pub seed: u64,
    pub sampling_rate_hz: f64,
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { trials: 32, channels: 8, timepoints: 32, subjects: 2, images: None, dim: 768, seed: 0, sampling_rate_hz: 250.0, noise: 0.3 }
    }
}

/// Paths written by [`write_synthetic`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub archive: PathBuf,
    pub embeddings: PathBuf,
    pub montage: PathBuf,
    pub config: PathBuf,
}

fn image_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("img{i:04}")).collect()
}

/// Clean response to an embedding for one subject.
fn response(e: &[f64], map: &Tensor, spatial: &Tensor, temporal: &Tensor, gain: f64, offset: &[f64]) -> Tensor {
    let (nc, nt) = (spatial.shape()[1], temporal.shape()[1]);
    let z: Vec<f64> = (0..COMPONENTS).map(|j| map.row(j).iter().zip(e).map(|(w, x)| w * x).sum()).collect();
    let mut out = vec![0.0; nc * nt];
    for c in 0..nc {
        for t in 0..nt {
            let v: f64 = (0..COMPONENTS).map(|j| z[j] * spatial.get2(j, c) * temporal.get2(j, t)).sum();
            out[c * nt + t] = offset[c] + gain * v;
        }
    }
    Tensor::new(&[nc, nt], out).expect("shape from construction")
}

/// Writes `archive/`, `embeddings/`, `montage.csv` and `config.toml` under `out`.
pub fn write_synthetic(out: &Path, spec: &SynthSpec) -> Result<SynthOutput> {
    if spec.trials == 0 || spec.channels < 3 || spec.timepoints == 0 || spec.subjects == 0 || spec.dim == 0 {
        return Err(Error::Config("synthetic data needs trials ≥ 1, channels ≥ 3, timepoints ≥ 1, subjects ≥ 1, dim ≥ 1".into()));
    }
    let n_images = spec.images.unwrap_or((spec.trials / 4).max(2));
    if n_images < 2 || n_images > spec.trials {
        return Err(Error::Config(format!("{n_images} images cannot cover {} trials with a train and a test image", spec.trials)));
    }
    fs::create_dir_all(out).map_err(Error::io(out))?;
    let ids = image_ids(n_images);
    let index = EmbeddingIndex::synthetic(spec.seed, ids.clone(), spec.dim)?;

    let mut r = rng::stream(spec.seed, Stream::Synthetic, stable_hash("synth/patterns"));
    let map = rng::normal_tensor(&[COMPONENTS, spec.dim], &mut r);
    let spatial = rng::normal_tensor(&[COMPONENTS, spec.channels], &mut r);
    let nt = spec.timepoints as f64;
    let temporal = Tensor::new(
        &[COMPONENTS, spec.timepoints],
        (0..COMPONENTS)
            .flat_map(|j| {
                let centre = (j as f64 + 1.0) / (COMPONENTS as f64 + 1.0);
                let freq = 1.0 + j as f64;
                (0..spec.timepoints).map(move |t| {
                    let u = t as f64 / nt;
                    (-((u - centre) / 0.2).powi(2)).exp() * (2.0 * std::f64::consts::PI * freq * u).cos()
                })
            })
            .collect(),
    )?;

    let channel_names: Vec<String> = (0..spec.channels).map(|c| format!("CH{c:03}")).collect();
    let info = ArchiveInfo {
        dataset_id: "synthetic".into(),
        sampling_rate_hz: spec.sampling_rate_hz,
        channel_names: channel_names.clone(),
        n_timepoints: spec.timepoints,
        subjects: vec![],
        onset_ms: None,
        units: Some("a.u.".into()),
    };
    let archive_dir = out.join("archive");
    let mut w = ArchiveWriter::create(&archive_dir, info)?;
    for s in 0..spec.subjects {
        let subject = format!("sub-{:02}", s + 1);
        let gain = 1.0 + 0.15 * s as f64;
        let mut sr = rng::stream(spec.seed, Stream::Synthetic, stable_hash(&subject));
        let offset: Vec<f64> = (0..spec.channels).map(|_| 2.0 * rng::standard_normal(&mut sr)).collect();
        for k in 0..spec.trials {
            let img = k % n_images;
            let id = &ids[img];
            let split = if img % 4 == 3 || img + 1 == n_images && n_images < 4 { TEST } else { TRAIN };
            let clean = response(&synthetic_embedding(spec.seed, id, spec.dim), &map, &spatial, &temporal, gain, &offset);
            let noise = rng::normal_tensor(&[spec.channels, spec.timepoints], &mut sr);
            let x = clean.zip_map(&noise, |c, n| c + spec.noise * n)?;
            w.push(&format!("{subject}/{id}/{}", k / n_images), &subject, id, (k / n_images) as u32, split, &x)?;
        }
    }
    w.finish()?;

    let emb_dir = out.join("embeddings");
    write_embeddings(&emb_dir, &index)?;
    let montage = out.join("montage.csv");
    write_montage(&montage, &spread_montage(channel_names)?)?;

    let mut cfg = RunConfig::preset("tiny")?;
    cfg.seed = spec.seed;
    cfg.output_dir = PathBuf::from("run");
    cfg.data.archive = PathBuf::from("archive");
    cfg.data.montage = "montage.csv".into();
    cfg.embeddings.path = PathBuf::from("embeddings");
    cfg.embeddings.dim = spec.dim;
    cfg.model.cross_attn_dim = spec.dim;
    cfg.model.sample_shape = (spec.channels, spec.timepoints);
    cfg.schedule.steps = 200;
    cfg.train.epochs = 2;
    cfg.train.learning_rate = 1e-3;
    cfg.topo.window_ms = (spec.timepoints as f64 / 4.0).floor().max(1.0) * 1000.0 / spec.sampling_rate_hz;
    let config = out.join("config.toml");
    fs::write(&config, cfg.to_toml()?).map_err(Error::io(&config))?;

    Archive::open(&archive_dir)?;
    Ok(SynthOutput { archive: archive_dir, embeddings: emb_dir, montage, config })
}
