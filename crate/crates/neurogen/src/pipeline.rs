//! Command implementations over a validated run.
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! resolved-config.toml
//! checkpoints/<subject>/{epoch-NNNN,best,final}.ckpt, loss.log
//! generated/                 trial archive, split "generated"
//! reports/<dataset>_<kind>.{csv,json}
//! topo/<dataset>_<subject>.{png,json}
//! fusion/<mode>/...          one run per fusion mode (compare-fusion)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::thread;

use neurogen_core::embedding::{stable_hash, EmbeddingSource};
use neurogen_core::metrics::{evaluate_pairs, CrossSubjectMatrix, MetricReport, StrategyTable};
use neurogen_core::sampler;
use neurogen_core::topo::{comparison, Montage, TopoParams};
use neurogen_core::trainer::{Example, Trainer};
use neurogen_core::{ConditionEmbedding, DenoiserParams, FusionMode, Tensor};
use serde::Serialize;

use crate::archive::{Archive, ArchiveInfo, ArchiveWriter, GENERATED, TRAIN};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::embeddings::{read_embeddings, Provider, RemoteProvider};
use crate::error::{bail, Error, Result};
use crate::montage::load_montage;
use crate::render::{write_topography, TopoSidecar};

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LOSS_LOG: &str = "loss.log";

/// A configuration checked against the files it names.
#[derive(Debug)]
pub struct Run {
    pub cfg: RunConfig,
    pub archive: Archive,
    pub provider: Provider,
    pub montage: Option<Montage>,
}

fn must_exist(path: &Path, key: &str) -> Result<()> {
    if !path.exists() {
        bail!(Config, "{key}: {} does not exist", path.display());
    }
    Ok(())
}

impl Run {
    pub fn open(cfg: RunConfig) -> Result<Self> {
        must_exist(&cfg.data.archive, "data.archive")?;
        let archive = Archive::open(&cfg.data.archive)?;
        let m = archive.manifest();
        if m.sample_shape() != cfg.model.sample_shape {
            bail!(Config, "model.sample_shape is {:?}, but the archive holds {:?} trials", cfg.model.sample_shape, m.sample_shape());
        }
        let e = &cfg.embeddings;
        let provider = match e.source {
            EmbeddingSource::File => {
                must_exist(&e.path, "embeddings.path")?;
                Provider::Index(read_embeddings(&e.path)?)
            }
            EmbeddingSource::Synthetic => Provider::Synthetic { seed: e.seed, dim: e.dim },
            EmbeddingSource::Remote => {
                must_exist(&e.image_dir, "embeddings.image_dir")?;
                Provider::Remote(RemoteProvider::new(&e.url, &e.image_dir, e.dim, std::time::Duration::from_secs_f64(e.timeout_s)))
            }
        };
        provider.expect_dim(cfg.model.cross_attn_dim).map_err(|err| Error::Config(format!("model.cross_attn_dim: {}", inner(&err))))?;
        let montage = if cfg.data.montage.is_empty() {
            None
        } else {
            if !cfg.data.montage.starts_with("builtin:") {
                must_exist(Path::new(&cfg.data.montage), "data.montage")?;
            }
            let mt = load_montage(&cfg.data.montage)?;
            mt.expect_channels(&m.channel_names).map_err(|err| Error::Config(format!("data.montage: {}", inner(&Error::from(err)))))?;
            Some(mt)
        };
        for s in &cfg.data.subjects {
            if !m.subjects.contains(s) {
                bail!(Config, "data.subjects: `{s}` is not in the archive (subjects: {})", m.subjects.join(", "));
            }
        }
        Ok(Self { cfg, archive, provider, montage })
    }

    /// Same files with another configuration (e.g. a different fusion mode).
    pub fn with_config(&self, cfg: RunConfig) -> Result<Self> {
        Self::open(cfg)
    }

    pub fn out(&self) -> &Path {
        &self.cfg.output_dir
    }

    /// Configured subjects, or every subject with training trials.
    pub fn subjects(&self) -> Vec<String> {
        if !self.cfg.data.subjects.is_empty() {
            return self.cfg.data.subjects.clone();
        }
        let m = self.archive.manifest();
        m.subjects.iter().filter(|s| m.splits.get(*s).is_some_and(|sp| sp.get(TRAIN).is_some_and(|r| !r.is_empty()))).cloned().collect()
    }

    pub fn checkpoint_dir(&self, subject: &str) -> PathBuf {
        self.out().join("checkpoints").join(subject)
    }

    pub fn generated_dir(&self) -> PathBuf {
        self.out().join("generated")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.out().join("reports")
    }

    fn dataset(&self) -> &str {
        &self.archive.manifest().dataset_id
    }

    pub fn write_snapshot(&self) -> Result<PathBuf> {
        self.cfg.write_snapshot(self.out())
    }

    fn final_checkpoint(&self, subject: &str) -> Result<Checkpoint> {
        let path = self.checkpoint_dir(subject).join(FINAL_CHECKPOINT);
        if !path.exists() {
            bail!(Data, "no checkpoint for subject `{subject}` at {} (run `train` first)", path.display());
        }
        Checkpoint::load_for(&path, &self.cfg.model, &self.cfg.schedule)
    }

    pub fn open_generated(&self) -> Result<Archive> {
        let dir = self.generated_dir();
        if !dir.exists() {
            bail!(Data, "no generated archive at {} (run `generate` first)", dir.display());
        }
        Archive::open(dir)
    }
}

fn inner(e: &Error) -> String {
    match e {
        Error::Core(c) => match c {
            neurogen_core::Error::Montage(m) | neurogen_core::Error::Data(m) => m.clone(),
            other => other.to_string(),
        },
        Error::Data(m) => m.clone(),
        other => other.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub subject: String,
    pub epochs: usize,
    pub steps: u64,
    pub final_loss: f64,
    pub best_loss: f64,
}

/// Trains one model per subject on its normalized training trials.
pub fn train(run: &Run) -> Result<Vec<TrainOutcome>> {
    let cfg = &run.cfg;
    let pad = cfg.model.pad_spec();
    let mut outcomes = Vec::new();
    for subject in run.subjects() {
        let stats = run.archive.fit_stats(&subject)?;
        let mut conds: BTreeMap<String, ConditionEmbedding> = BTreeMap::new();
        let mut examples = Vec::new();
        for (e, x) in run.archive.load(&subject, TRAIN)? {
            if !conds.contains_key(&e.image_id) {
                conds.insert(e.image_id.clone(), run.provider.get(&e.image_id)?);
            }
            examples.push(Example { signal: pad.pad(&stats.normalize(&x)?)?, cond: conds[&e.image_id].clone() });
        }
        let dir = run.checkpoint_dir(&subject);
        fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
        let log_path = dir.join(LOSS_LOG);
        let mut log = BufWriter::new(File::create(&log_path).map_err(Error::io(&log_path))?);
        writeln!(log, "epoch,step,t_bucket,loss").map_err(Error::io(&log_path))?;

        let model = DenoiserParams::init(&cfg.model, cfg.seed)?;
        let mut trainer = Trainer::new(model, cfg.train_config())?;
        let mut best = f64::INFINITY;
        let mut last = f64::NAN;
        for epoch in 1..=cfg.train.epochs {
            let logged = trainer.trace.len();
            last = trainer.epoch(epoch, &examples)?;
            for r in &trainer.trace.records[logged..] {
                writeln!(log, "{},{},{},{}", r.epoch, r.step, r.t_bucket, r.loss).map_err(Error::io(&log_path))?;
            }
            log.flush().map_err(Error::io(&log_path))?;
            let ck = Checkpoint::new(trainer.export_params()?, cfg.schedule, cfg.seed, epoch, trainer.steps_done(), Some(last), Some(stats.clone()));
            if cfg.train.checkpoint_every > 0 && epoch % cfg.train.checkpoint_every == 0 {
                ck.save(dir.join(format!("epoch-{epoch:04}.ckpt")))?;
            }
            if last < best {
                best = last;
                ck.save(dir.join(BEST_CHECKPOINT))?;
            }
            eprintln!("{subject}: epoch {epoch}/{} loss {last:.6}", cfg.train.epochs);
        }
        let ck = Checkpoint::new(trainer.export_params()?, cfg.schedule, cfg.seed, cfg.train.epochs, trainer.steps_done(), Some(last), Some(stats));
        ck.save(dir.join(FINAL_CHECKPOINT))?;
        outcomes.push(TrainOutcome { subject, epochs: cfg.train.epochs, steps: trainer.steps_done(), final_loss: last, best_loss: best });
    }
    if outcomes.is_empty() {
        bail!(Data, "no subject has training trials");
    }
    Ok(outcomes)
}

/// Seed of the sampling streams for one image of one subject.
pub fn image_seed(seed: u64, subject: &str, image_id: &str) -> u64 {
    stable_hash(&format!("{seed}/{subject}/{image_id}"))
}

/// Samples every image of the configured split with each subject's final
/// checkpoint and writes them, de-normalized, as a trial archive.
pub fn generate(run: &Run) -> Result<Archive> {
    let cfg = &run.cfg;
    let sched = cfg.schedule.build()?;
    let mut info = ArchiveInfo::of(run.archive.manifest());
    info.subjects.clear();
    let mut w = ArchiveWriter::create(run.generated_dir(), info)?;
    for subject in run.subjects() {
        let ck = run.final_checkpoint(&subject)?;
        let stats = ck.header.normalization.clone().ok_or_else(|| Error::Data(format!("checkpoint for `{subject}` has no normalization statistics")))?;
        let images: BTreeSet<String> = run.archive.select(&subject, &cfg.generate.split).into_iter().map(|e| e.image_id.clone()).collect();
        if images.is_empty() {
            bail!(Data, "subject `{subject}` has no `{}` trials to generate for", cfg.generate.split);
        }
        let images: Vec<String> = images.into_iter().collect();
        let conds = images.iter().map(|id| run.provider.get(id)).collect::<Result<Vec<_>>>()?;
        let k = cfg.generate.samples_per_image;
        let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(images.len());
        let chunk = images.len().div_ceil(workers);
        let results: Vec<Result<Vec<sampler::BrainSignal>>> = thread::scope(|s| {
            let handles: Vec<_> = images
                .chunks(chunk)
                .zip(conds.chunks(chunk))
                .map(|(ids, cs)| {
                    let (params, sched, stats, subject) = (&ck.params, &sched, &stats, &subject);
                    s.spawn(move || {
                        ids.iter()
                            .zip(cs)
                            .map(|(id, c)| Ok(sampler::generate(params, c, sched, image_seed(cfg.seed, subject, id), k, Some(stats))?))
                            .collect::<Vec<Result<_>>>()
                    })
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("sampling thread panicked")).collect()
        });
        for (id, samples) in images.iter().zip(results) {
            for (j, s) in samples?.iter().enumerate() {
                w.push(&format!("{subject}/{id}/gen{j}"), &subject, id, j as u32, GENERATED, &s.physical)?;
            }
        }
        eprintln!("{subject}: generated {} images × {k}", images.len());
    }
    w.finish()
}

/// Normalized repetition averages of generated signals and of targets, per subject.
struct SubjectAverages {
    generated: BTreeMap<String, Tensor>,
    targets: BTreeMap<String, Tensor>,
}

fn subject_averages(run: &Run, gen: &Archive, subject: &str) -> Result<SubjectAverages> {
    let stats = run.archive.fit_stats(subject)?;
    let targets = run.archive.average_repetitions(subject, &run.cfg.generate.split, Some(&stats))?.by_image;
    let generated = gen.average_repetitions(subject, GENERATED, Some(&stats))?.by_image;
    Ok(SubjectAverages { generated, targets })
}

fn pairs_for<'a>(gen: &'a BTreeMap<String, Tensor>, targets: &'a BTreeMap<String, Tensor>, label: &str) -> Result<Vec<(&'a Tensor, &'a Tensor)>> {
    gen.iter()
        .map(|(id, g)| match targets.get(id) {
            Some(t) => Ok((g, t)),
            None => Err(Error::Data(format!("{label}: no target trials for generated image `{id}`"))),
        })
        .collect()
}

#[derive(Serialize)]
struct ReportDoc<'a, T: Serialize> {
    dataset_id: &'a str,
    kind: &'a str,
    #[serde(flatten)]
    body: T,
}

fn write_report<T: Serialize>(run: &Run, kind: &str, csv: &[(&str, String)], body: T) -> Result<()> {
    let dir = run.reports_dir();
    fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
    let stem = format!("{}_{kind}", run.dataset());
    for (suffix, text) in csv {
        let p = dir.join(format!("{stem}{suffix}.csv"));
        fs::write(&p, text).map_err(Error::io(&p))?;
    }
    let p = dir.join(format!("{stem}.json"));
    let mut text = serde_json::to_string_pretty(&ReportDoc { dataset_id: run.dataset(), kind, body }).map_err(|e| Error::Data(e.to_string()))?;
    text.push('\n');
    fs::write(&p, text).map_err(Error::io(&p))
}

#[derive(Serialize)]
struct WithinDoc<'a> {
    report: &'a MetricReport,
    mse_average: f64,
    pcc_average: f64,
}

/// Per-subject MSE and PCC of generated against repetition-averaged target signals.
pub fn eval_within(run: &Run) -> Result<MetricReport> {
    let gen = run.open_generated()?;
    let mut report = MetricReport::default();
    for subject in run.subjects() {
        let a = subject_averages(run, &gen, &subject)?;
        if a.generated.is_empty() {
            bail!(Data, "no generated signals for subject `{subject}`");
        }
        let (mse, pcc) = evaluate_pairs(pairs_for(&a.generated, &a.targets, &subject)?)?;
        report.push(subject, mse, pcc);
    }
    let doc = WithinDoc { report: &report, mse_average: report.mse_average(), pcc_average: report.pcc_average() };
    write_report(run, "within-subject", &[("", report.to_csv())], doc)?;
    Ok(report)
}

#[derive(Serialize)]
struct CrossDoc<'a> {
    mse: &'a CrossSubjectMatrix,
    pcc: &'a CrossSubjectMatrix,
}

/// Signals generated by each subject's model against every other subject's targets.
pub fn eval_cross(run: &Run) -> Result<(CrossSubjectMatrix, CrossSubjectMatrix)> {
    let gen = run.open_generated()?;
    let subjects = run.subjects();
    if subjects.len() < 2 {
        bail!(Data, "cross-subject evaluation needs at least two subjects, got {}", subjects.len());
    }
    let stats = subjects.iter().map(|s| run.archive.fit_stats(s)).collect::<Result<Vec<_>>>()?;
    let targets = subjects
        .iter()
        .zip(&stats)
        .map(|(s, st)| Ok(run.archive.average_repetitions(s, &run.cfg.generate.split, Some(st))?.by_image))
        .collect::<Result<Vec<_>>>()?;
    let mut mse = CrossSubjectMatrix::new(subjects.clone());
    let mut pcc = CrossSubjectMatrix::new(subjects.clone());
    for (si, source) in subjects.iter().enumerate() {
        let generated = gen.average_repetitions(source, GENERATED, Some(&stats[si]))?.by_image;
        for (ti, target) in subjects.iter().enumerate() {
            if si == ti {
                continue;
            }
            let pairs: Vec<_> = generated.iter().filter_map(|(id, g)| targets[ti].get(id).map(|t| (g, t))).collect();
            if pairs.is_empty() {
                bail!(Data, "subjects `{source}` and `{target}` share no evaluated images");
            }
            let (m, p) = evaluate_pairs(pairs)?;
            mse.set(si, ti, m)?;
            pcc.set(si, ti, p)?;
        }
    }
    write_report(run, "cross-subject", &[("_mse", mse.to_csv()), ("_pcc", pcc.to_csv())], CrossDoc { mse: &mse, pcc: &pcc })?;
    Ok((mse, pcc))
}

/// Trains, samples and evaluates once per fusion mode with everything else fixed.
pub fn compare_fusion(run: &Run) -> Result<StrategyTable> {
    let mut table = StrategyTable::default();
    for mode in FusionMode::ALL {
        let mut cfg = run.cfg.clone();
        cfg.model.fusion = mode;
        cfg.output_dir = run.out().join("fusion").join(mode.as_str());
        let sub = run.with_config(cfg)?;
        sub.write_snapshot()?;
        eprintln!("fusion mode {mode}");
        train(&sub)?;
        generate(&sub)?;
        table.rows.push((mode, eval_within(&sub)?));
    }
    write_report(run, "fusion-comparison", &[("", table.to_csv())], &table)?;
    Ok(table)
}

/// Train / test / generated / difference topographies per subject.
pub fn topo(run: &Run) -> Result<Vec<PathBuf>> {
    let Some(montage) = &run.montage else {
        bail!(Config, "data.montage is required for topographies");
    };
    let gen = run.open_generated()?;
    let m = run.archive.manifest();
    let p = TopoParams {
        window_ms: run.cfg.topo.window_ms,
        rate_hz: m.sampling_rate_hz,
        grid_res: run.cfg.topo.grid_res,
        onset_ms: -m.onset_ms.unwrap_or(0.0),
    };
    let dir = run.out().join("topo");
    let mut written = Vec::new();
    for subject in run.subjects() {
        let train = run.archive.average_repetitions(&subject, TRAIN, None)?.grand;
        let test = run.archive.average_repetitions(&subject, &run.cfg.generate.split, None)?.grand;
        let generated = gen.average_repetitions(&subject, GENERATED, None)?.grand;
        let rows = comparison(&train, &test, &generated, montage, &p)?;
        let sidecar = TopoSidecar {
            dataset_id: m.dataset_id.clone(),
            subject: subject.clone(),
            units: m.units.clone(),
            window_ms: p.window_ms,
            sampling_rate_hz: p.rate_hz,
            grid_res: p.grid_res,
            rows: TopoSidecar::rows_of(&rows),
        };
        let stem = format!("{}_{subject}", m.dataset_id);
        write_topography(&dir, &stem, &rows, &sidecar)?;
        written.push(dir.join(format!("{stem}.png")));
    }
    Ok(written)
}
