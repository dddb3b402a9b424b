//! Checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset 0   8 bytes   magic "NGENCKPT"
//! offset 8   u32       format version (1)
//! offset 12  u32       header length H in bytes
//! offset 16  H bytes   UTF-8 JSON header (CheckpointHeader)
//! offset 16+H          parameter blocks in header order, each the
//!                      row-major f32 values of one tensor
//! ```
//!
//! Parameters are computed in f64 and stored rounded to f32.

use std::fs;
use std::path::Path;

use neurogen_core::data::NormalizationStats;
use neurogen_core::{DenoiserConfig, DenoiserParams, ScheduleParams, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"NGENCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: DenoiserConfig,
    pub schedule: ScheduleParams,
    pub seed: u64,
    pub epoch: usize,
    pub step: u64,
    /// Mean training loss of the epoch that produced the weights.
    pub loss: Option<f64>,
    /// Training-split statistics the model's signals are normalized with.
    pub normalization: Option<NormalizationStats>,
    pub blocks: Vec<BlockInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: DenoiserParams,
}

impl Checkpoint {
    pub fn new(
        params: DenoiserParams,
        schedule: ScheduleParams,
        seed: u64,
        epoch: usize,
        step: u64,
        loss: Option<f64>,
        normalization: Option<NormalizationStats>,
    ) -> Self {
        let blocks = params.params().iter().map(|p| BlockInfo { name: p.name.clone(), shape: p.value.shape().to_vec() }).collect();
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            config: params.config().clone(),
            schedule,
            seed,
            epoch,
            step,
            loss: loss.filter(|l| l.is_finite()),
            normalization,
            blocks,
        };
        Self { header, params }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header).map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;
        let mut out = Vec::with_capacity(16 + header.len() + 4 * self.params.params().scalar_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for p in self.params.params().iter() {
            for &v in p.value.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: String| Error::format(path, m);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (missing NGENCKPT magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(format!("format version {version} is not supported (expected {FORMAT_VERSION})")));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        if header.format_version != version {
            return Err(bad(format!("header version {} disagrees with preamble {version}", header.format_version)));
        }
        let mut rest = &bytes[16 + hlen..];
        let mut named = Vec::with_capacity(header.blocks.len());
        for b in &header.blocks {
            let n: usize = b.shape.iter().product();
            if rest.len() < 4 * n {
                return Err(bad(format!("block `{}` is truncated", b.name)));
            }
            let (head, tail) = rest.split_at(4 * n);
            let values = head.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
            named.push((b.name.clone(), Tensor::new(&b.shape, values)?));
            rest = tail;
        }
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes after the last block", rest.len())));
        }
        let params = DenoiserParams::from_named(&header.config, named).map_err(|e| bad(e.to_string()))?;
        Ok(Self { header, params })
    }

    /// Writes through a temporary file so a failed write never leaves a partial checkpoint.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(Error::io(dir))?;
        }
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes()?).map_err(Error::io(&tmp))?;
        fs::rename(&tmp, path).map_err(Error::io(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(Error::io(path))?;
        Self::from_bytes(&bytes, path)
    }

    /// Loads and checks the stored configuration against `expected`.
    pub fn load_for(path: impl AsRef<Path>, expected: &DenoiserConfig, schedule: &ScheduleParams) -> Result<Self> {
        let path = path.as_ref();
        let ck = Self::load(path)?;
        let mut diff = config_differences(&ck.header.config, expected);
        if ck.header.schedule != *schedule {
            diff.push("schedule".into());
        }
        if !diff.is_empty() {
            return Err(neurogen_core::Error::Compatibility(format!(
                "{} was trained with a different configuration; differing fields: {}",
                path.display(),
                diff.join(", ")
            ))
            .into());
        }
        Ok(ck)
    }
}

/// Names of the top-level configuration fields that differ.
pub fn config_differences(a: &DenoiserConfig, b: &DenoiserConfig) -> Vec<String> {
    let (Ok(serde_json::Value::Object(a)), Ok(serde_json::Value::Object(b))) = (serde_json::to_value(a), serde_json::to_value(b)) else {
        return vec!["config".into()];
    };
    a.iter().filter(|(k, v)| b.get(*k) != Some(v)).map(|(k, _)| k.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use neurogen_core::FusionMode;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig { cross_attn_dim: 4, ..DenoiserConfig::tiny() }
    }

    #[test]
    fn round_trip_is_f32_exact() {
        let p = DenoiserParams::randomized(&tiny(), 3).unwrap();
        let stats = NormalizationStats { mean: vec![0.1; 8], std: vec![1.0 / 3.0; 8] };
        let ck = Checkpoint::new(p, ScheduleParams::default(), 3, 2, 40, Some(0.5), Some(stats.clone()));
        let d = tempfile::tempdir().unwrap();
        let path = d.path().join("a.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.header, ck.header);
        assert_eq!(back.header.normalization, Some(stats));
        for (a, b) in back.params.params().iter().zip(ck.params.params().iter()) {
            assert_eq!(a.name, b.name);
            assert!(a.value.data().iter().zip(b.value.data()).all(|(x, y)| *x == *y as f32 as f64));
        }
        // saving the reloaded weights gives the same bytes
        assert_eq!(back.to_bytes().unwrap(), fs::read(&path).unwrap());
    }

    #[test]
    fn mismatch_lists_fields() {
        let p = DenoiserParams::init(&tiny(), 0).unwrap();
        let d = tempfile::tempdir().unwrap();
        let path = d.path().join("a.ckpt");
        Checkpoint::new(p, ScheduleParams::default(), 0, 0, 0, None, None).save(&path).unwrap();
        let other = DenoiserConfig { fusion: FusionMode::Addition, heads: 2, ..tiny() };
        let err = Checkpoint::load_for(&path, &other, &ScheduleParams::default()).unwrap_err().to_string();
        assert!(err.contains("fusion") && err.contains("heads") && !err.contains("sample_shape"), "{err}");
        assert!(Checkpoint::load_for(&path, &tiny(), &ScheduleParams::default()).is_ok());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let p = DenoiserParams::init(&tiny(), 0).unwrap();
        let bytes = Checkpoint::new(p, ScheduleParams::default(), 0, 0, 0, None, None).to_bytes().unwrap();
        let path = Path::new("x.ckpt");
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], path).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra, path).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT\x01\0\0\0\0\0\0\0", path).is_err());
    }
}
