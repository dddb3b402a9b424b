//! Embedding files and the providers that serve condition embeddings by image id.
//!
//! A stored index is a pair of files: `embeddings.f32` (little-endian f32,
//! row-major `n × dim`) and `embeddings.index.json` (`{dim, ids}` in row order).

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::RwLock;
use std::time::Duration;

use base64::Engine as _;
use neurogen_core::embedding::{synthetic_embedding, EmbeddingIndex, EmbeddingSource};
use neurogen_core::ConditionEmbedding;
use serde::{Deserialize, Serialize};

use crate::archive::read_json;
use crate::error::{Error, Result};

pub const VECTORS_FILE: &str = "embeddings.f32";
pub const INDEX_FILE: &str = "embeddings.index.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileIndex {
    dim: usize,
    ids: Vec<String>,
}

/// Loads the file pair in `dir`.
pub fn read_embeddings(dir: impl AsRef<Path>) -> Result<EmbeddingIndex> {
    let dir = dir.as_ref();
    let ipath = dir.join(INDEX_FILE);
    let index: FileIndex = read_json(&ipath)?;
    if index.dim == 0 {
        return Err(Error::format(&ipath, "field `dim` must be positive"));
    }
    let vpath = dir.join(VECTORS_FILE);
    let bytes = fs::read(&vpath).map_err(Error::io(&vpath))?;
    let want = index.ids.len() * index.dim * 4;
    if bytes.len() != want {
        return Err(Error::format(
            &vpath,
            format!("field `ids` lists {} rows of dim {} ({want} bytes), file has {} bytes", index.ids.len(), index.dim, bytes.len()),
        ));
    }
    let values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    EmbeddingIndex::new(index.dim, index.ids, values, EmbeddingSource::File).map_err(|e| Error::format(&vpath, e.to_string()))
}

pub fn write_embeddings(dir: impl AsRef<Path>, index: &EmbeddingIndex) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let bytes: Vec<u8> = index.vectors().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    let vpath = dir.join(VECTORS_FILE);
    fs::write(&vpath, bytes).map_err(Error::io(&vpath))?;
    let ipath = dir.join(INDEX_FILE);
    let mut text = serde_json::to_string_pretty(&FileIndex { dim: index.dim(), ids: index.ids().to_vec() })
        .map_err(|e| Error::format(&ipath, e.to_string()))?;
    text.push('\n');
    fs::write(&ipath, text).map_err(Error::io(&ipath))
}

/// Body of a request to an embedding service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRequest {
    pub image_id: String,
    /// Raw image file bytes, standard base64.
    pub image_base64: String,
}

/// Body of the service's answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingResponse {
    pub image_id: String,
    pub dim: usize,
    pub vector: Vec<f64>,
}

const IMAGE_EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "webp", "bmp", "gif"];

/// Client for a service that embeds images on request. Answers are cached
/// per image id; failures are reported, never replaced by another source.
#[derive(Debug)]
pub struct RemoteProvider {
    url: String,
    image_dir: PathBuf,
    dim: usize,
    agent: ureq::Agent,
    cache: RwLock<HashMap<String, Vec<f64>>>,
}

impl RemoteProvider {
    pub fn new(url: impl Into<String>, image_dir: impl Into<PathBuf>, dim: usize, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).http_status_as_error(false).build().into();
        Self { url: url.into(), image_dir: image_dir.into(), dim, agent, cache: RwLock::new(HashMap::new()) }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cached(&self) -> usize {
        self.cache.read().unwrap_or_else(|p| p.into_inner()).len()
    }

    fn image_path(&self, id: &str) -> Result<PathBuf> {
        let direct = self.image_dir.join(id);
        if direct.is_file() {
            return Ok(direct);
        }
        IMAGE_EXTENSIONS
            .iter()
            .map(|ext| self.image_dir.join(format!("{id}.{ext}")))
            .find(|p| p.is_file())
            .ok_or_else(|| Error::Data(format!("no image file for `{id}` in {}", self.image_dir.display())))
    }

    fn fetch(&self, id: &str) -> Result<Vec<f64>> {
        let path = self.image_path(id)?;
        let bytes = fs::read(&path).map_err(Error::io(&path))?;
        let req = EmbeddingRequest { image_id: id.into(), image_base64: base64::engine::general_purpose::STANDARD.encode(bytes) };
        let body = serde_json::to_string(&req).map_err(|e| Error::Provider(e.to_string()))?;
        let mut resp = self
            .agent
            .post(&self.url)
            .header("content-type", "application/json")
            .send(body)
            .map_err(|e| Error::Provider(format!("request for `{id}` to {} failed: {e}", self.url)))?;
        let status = resp.status();
        let text = resp.body_mut().read_to_string().map_err(|e| Error::Provider(format!("reading the answer for `{id}`: {e}")))?;
        if !status.is_success() {
            return Err(Error::Provider(format!("service answered {status} for `{id}`: {}", text.trim())));
        }
        let r: EmbeddingResponse = serde_json::from_str(&text).map_err(|e| Error::Provider(format!("malformed answer for `{id}`: {e}")))?;
        if r.image_id != id {
            return Err(Error::Provider(format!("asked for `{id}`, service answered for `{}`", r.image_id)));
        }
        if r.dim != self.dim || r.vector.len() != self.dim {
            return Err(Error::Provider(format!(
                "answer for `{id}` has dim {} and {} values, but the cross-attention dimension is set to {}",
                r.dim,
                r.vector.len(),
                self.dim
            )));
        }
        Ok(r.vector)
    }

    pub fn get(&self, id: &str) -> Result<ConditionEmbedding> {
        if let Some(v) = self.cache.read().unwrap_or_else(|p| p.into_inner()).get(id) {
            return Ok(ConditionEmbedding::from_vector(id, v.clone())?);
        }
        let v = self.fetch(id)?;
        let cond = ConditionEmbedding::from_vector(id, v.clone())?;
        self.cache.write().unwrap_or_else(|p| p.into_inner()).entry(id.to_string()).or_insert(v);
        Ok(cond)
    }
}

/// Source of condition embeddings for the pipelines.
#[derive(Debug)]
pub enum Provider {
    Index(EmbeddingIndex),
    /// Seeded unit vectors for any id.
    Synthetic { seed: u64, dim: usize },
    Remote(RemoteProvider),
}

impl Provider {
    pub fn dim(&self) -> usize {
        match self {
            Provider::Index(i) => i.dim(),
            Provider::Synthetic { dim, .. } => *dim,
            Provider::Remote(r) => r.dim(),
        }
    }

    pub fn source(&self) -> EmbeddingSource {
        match self {
            Provider::Index(i) => i.source(),
            Provider::Synthetic { .. } => EmbeddingSource::Synthetic,
            Provider::Remote(_) => EmbeddingSource::Remote,
        }
    }

    pub fn get(&self, id: &str) -> Result<ConditionEmbedding> {
        match self {
            Provider::Index(i) => Ok(i.get(id)?),
            Provider::Synthetic { seed, dim } => Ok(ConditionEmbedding::from_vector(id, synthetic_embedding(*seed, id, *dim))?),
            Provider::Remote(r) => r.get(id),
        }
    }

    /// Fails unless the provider's width is `dim`.
    pub fn expect_dim(&self, dim: usize) -> Result<()> {
        if self.dim() != dim {
            return Err(Error::Data(format!(
                "embedding width is {}, but the cross-attention dimension is set to {dim}",
                self.dim()
            )));
        }
        Ok(())
    }
}
