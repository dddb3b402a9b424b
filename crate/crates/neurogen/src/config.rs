//! Run configuration: one TOML document, preset defaults, `--set` overrides.
//!
//! Resolution order: the preset named by `preset` (default `eeg-things2`)
//! supplies every field, the file's tables are merged over it, then each
//! `key.path=value` override is applied. Values are parsed as TOML
//! (`train.epochs=3`, `model.sample_shape=[8,32]`); anything that does not
//! parse is taken as a string (`data.archive=runs/a`).
//!
//! Relative data paths resolve against the configuration file's directory.
//! A relative `output_dir` resolves against `$NEUROGEN_RUN_ROOT` when set,
//! otherwise against the configuration file's directory as well.

use std::fs;
use std::path::{Path, PathBuf};

use neurogen_core::embedding::EmbeddingSource;
use neurogen_core::trainer::TrainConfig;
use neurogen_core::{DenoiserConfig, ScheduleParams};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{bail, Error, Result};

pub const RUN_ROOT_ENV: &str = "NEUROGEN_RUN_ROOT";
pub const SNAPSHOT_FILE: &str = "resolved-config.toml";
pub const PRESETS: [&str; 3] = ["eeg-things2", "meg-things", "tiny"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Trial archive directory.
    pub archive: PathBuf,
    /// Montage file, `builtin:<name>`, or empty for none.
    pub montage: String,
    /// Subjects to run; empty selects every subject with a training split.
    pub subjects: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub source: EmbeddingSource,
    /// Directory of the embedding file pair (`file`).
    pub path: PathBuf,
    /// Width of generated vectors (`synthetic`) or of service answers (`remote`).
    pub dim: usize,
    /// Generator seed (`synthetic`).
    pub seed: u64,
    /// Service endpoint (`remote`).
    pub url: String,
    /// Directory with one image file per image id (`remote`).
    pub image_dir: PathBuf,
    pub timeout_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_clip: Option<f64>,
    pub ema_decay: Option<f64>,
    pub warmup_steps: usize,
    /// Write `epoch-NNNN.ckpt` every this many epochs; 0 keeps only final and best.
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    /// Samples per image; evaluation averages them.
    pub samples_per_image: usize,
    /// Split whose images are generated.
    pub split: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopoSection {
    pub window_ms: f64,
    pub grid_res: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub embeddings: EmbeddingConfig,
    pub model: DenoiserConfig,
    pub schedule: ScheduleParams,
    pub train: TrainSection,
    pub generate: GenerateSection,
    pub topo: TopoSection,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let (model, batch_size, montage) = match name {
            "eeg-things2" => (DenoiserConfig::eeg(), 16, "builtin:eeg-63"),
            "meg-things" => (DenoiserConfig::meg(), 4, "builtin:meg-271"),
            "tiny" => (DenoiserConfig::tiny(), 8, ""),
            other => bail!(Config, "unknown preset `{other}` (expected one of {})", PRESETS.join(", ")),
        };
        let t = TrainConfig::default();
        Ok(Self {
            preset: name.into(),
            seed: 0,
            output_dir: PathBuf::from("runs").join(name),
            data: DataConfig { archive: PathBuf::from("archive"), montage: montage.into(), subjects: vec![] },
            embeddings: EmbeddingConfig {
                source: EmbeddingSource::File,
                path: PathBuf::from("embeddings"),
                dim: model.cross_attn_dim,
                seed: 0,
                url: String::new(),
                image_dir: PathBuf::from("images"),
                timeout_s: 30.0,
            },
            schedule: t.schedule,
            train: TrainSection {
                learning_rate: t.learning_rate,
                weight_decay: t.weight_decay,
                epochs: t.epochs,
                batch_size,
                grad_clip: t.grad_clip,
                ema_decay: t.ema_decay,
                warmup_steps: t.warmup_steps,
                checkpoint_every: 1,
            },
            generate: GenerateSection { samples_per_image: 1, split: "test".into() },
            topo: TopoSection { window_ms: 100.0, grid_res: neurogen_core::topo::GRID_RES },
            model,
        })
    }

    /// Reads `path` (or nothing), applies overrides, resolves paths.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let (file, base_dir) = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                let table: Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                (table, p.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None => (Table::new(), PathBuf::new()),
        };
        let overrides = overrides.iter().map(|o| parse_override(o)).collect::<Result<Vec<_>>>()?;
        let preset = overrides
            .iter()
            .rev()
            .find(|(k, _)| k == "preset")
            .map(|(_, v)| v.clone())
            .or_else(|| file.get("preset").cloned())
            .map(|v| v.as_str().map(str::to_string).ok_or_else(|| Error::Config("`preset` must be a string".into())))
            .transpose()?
            .unwrap_or_else(|| PRESETS[0].to_string());
        let base = Self::preset(&preset)?;
        let mut table = to_table(&base)?;
        check_keys(&table, &file, "")?;
        merge(&mut table, file);
        let mut given = Table::new();
        for (key, value) in &overrides {
            set_path(&mut given, key, value.clone())?;
        }
        check_keys(&table, &given, "")?;
        for (key, value) in overrides {
            set_path(&mut table, &key, value)?;
        }
        let mut cfg: RunConfig = Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.resolve_paths(&base_dir);
        cfg.check()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let rel = |p: &mut PathBuf| {
            if p.is_relative() && !base.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        rel(&mut self.data.archive);
        rel(&mut self.embeddings.path);
        rel(&mut self.embeddings.image_dir);
        if !self.data.montage.is_empty() && !self.data.montage.starts_with("builtin:") {
            let mut m = PathBuf::from(&self.data.montage);
            rel(&mut m);
            self.data.montage = m.to_string_lossy().into_owned();
        }
        match std::env::var_os(RUN_ROOT_ENV).filter(|r| !r.is_empty()) {
            Some(root) if self.output_dir.is_relative() => self.output_dir = PathBuf::from(root).join(&self.output_dir),
            _ => rel(&mut self.output_dir),
        }
    }

    /// Range checks that need no files.
    pub fn check(&self) -> Result<()> {
        self.model.validate()?;
        self.train_config().validate()?;
        if self.generate.samples_per_image == 0 {
            bail!(Config, "generate.samples_per_image must be at least 1");
        }
        if !(self.topo.window_ms > 0.0) || self.topo.grid_res < 2 {
            bail!(Config, "topo.window_ms must be positive and topo.grid_res at least 2");
        }
        if self.embeddings.source == EmbeddingSource::Remote && self.embeddings.url.is_empty() {
            bail!(Config, "embeddings.url is required for the remote source");
        }
        if !(self.embeddings.timeout_s > 0.0) {
            bail!(Config, "embeddings.timeout_s must be positive");
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            weight_decay: self.train.weight_decay,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            seed: self.seed,
            schedule: self.schedule,
            grad_clip: self.train.grad_clip,
            ema_decay: self.train.ema_decay,
            warmup_steps: self.train.warmup_steps,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes `resolved-config.toml` into `dir`.
    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let path = dir.join(SNAPSHOT_FILE);
        fs::write(&path, self.to_toml()?).map_err(Error::io(&path))?;
        Ok(path)
    }
}

fn to_table(cfg: &RunConfig) -> Result<Table> {
    match Value::try_from(cfg).map_err(|e| Error::Config(e.to_string()))? {
        Value::Table(t) => Ok(t),
        _ => unreachable!("a struct serializes to a table"),
    }
}

/// `a.b.c=value` → (`a.b.c`, value).
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let Some((key, raw)) = s.split_once('=') else {
        bail!(Config, "override `{s}` is not of the form key.path=value");
    };
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        bail!(Config, "override `{s}` has an empty key segment");
    }
    let raw = raw.trim();
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().unwrap_or_default();
    let mut cur = table;
    let mut walked = String::new();
    for p in parts {
        walked.push_str(p);
        let next = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = next.as_table_mut().ok_or_else(|| Error::Config(format!("override `{key}`: `{walked}` is not a table")))?;
        walked.push('.');
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Rejects keys in `file` that the resolved configuration does not have.
/// Optional fields absent from the base are left to deserialization.
fn check_keys(base: &Table, file: &Table, prefix: &str) -> Result<()> {
    for (k, v) in file {
        match (base.get(k), v) {
            (Some(Value::Table(b)), Value::Table(f)) => check_keys(b, f, &format!("{prefix}{k}."))?,
            (None, _) if prefix == "model." || prefix.is_empty() => bail!(Config, "unknown key `{prefix}{k}`"),
            _ => {}
        }
    }
    Ok(())
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
