//! Image embeddings served by id, from stored vectors or a seeded generator.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::conditioning::ConditionEmbedding;
use crate::error::{bail, Result};
use crate::rng::{self, Stream};

/// Where the vectors of an index came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum EmbeddingSource {
    File,
    Synthetic,
    Remote,
}

/// FNV-1a; stable across platforms and releases.
pub fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Unit-norm vector determined by `(seed, image_id)`.
pub fn synthetic_embedding(seed: u64, image_id: &str, dim: usize) -> Vec<f64> {
    let mut r = rng::stream(seed, Stream::Synthetic, stable_hash(image_id));
    let mut v: Vec<f64> = (0..dim).map(|_| rng::standard_normal(&mut r)).collect();
    let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Immutable id → vector table.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<f64>,
    source: EmbeddingSource,
    rows: BTreeMap<String, usize>,
}

impl EmbeddingIndex {
    /// `vectors` is row-major `ids.len() × dim`.
    pub fn new(dim: usize, ids: Vec<String>, vectors: Vec<f64>, source: EmbeddingSource) -> Result<Self> {
        if dim == 0 {
            bail!(Config, "embedding dim must be positive");
        }
        if vectors.len() != ids.len() * dim {
            bail!(Data, "{} ids need {} values at dim {dim}, got {}", ids.len(), ids.len() * dim, vectors.len());
        }
        let mut rows = BTreeMap::new();
        for (i, id) in ids.iter().enumerate() {
            if rows.insert(id.clone(), i).is_some() {
                bail!(Data, "duplicate image id `{id}`");
            }
        }
        if let Some(p) = vectors.iter().position(|v| !v.is_finite()) {
            bail!(Data, "non-finite value in the vector of `{}`", ids[p / dim]);
        }
        Ok(Self { dim, ids, vectors, source, rows })
    }

    pub fn synthetic(seed: u64, ids: Vec<String>, dim: usize) -> Result<Self> {
        let vectors = ids.iter().flat_map(|id| synthetic_embedding(seed, id, dim)).collect();
        Self::new(dim, ids, vectors, EmbeddingSource::Synthetic)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vectors(&self) -> &[f64] {
        &self.vectors
    }

    pub fn source(&self) -> EmbeddingSource {
        self.source
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.rows.contains_key(id)
    }

    pub fn row(&self, id: &str) -> Option<&[f64]> {
        self.rows.get(id).map(|&i| &self.vectors[i * self.dim..(i + 1) * self.dim])
    }

    /// Rejects an index whose width differs from the model's cross-attention width.
    pub fn expect_dim(&self, dim: usize) -> Result<()> {
        if self.dim != dim {
            bail!(Data, "embedding width is {}, but the cross-attention dimension is set to {dim}", self.dim);
        }
        Ok(())
    }

    /// Single-token condition for `id`.
    pub fn get(&self, id: &str) -> Result<ConditionEmbedding> {
        match self.row(id) {
            Some(v) => ConditionEmbedding::from_vector(id, v.to_vec()),
            None => bail!(Lookup, "unknown image id `{id}`; nearest known ids: {}", self.nearest_ids(id, 3).join(", ")),
        }
    }

    /// Known ids closest to `id` by edit distance.
    pub fn nearest_ids(&self, id: &str, k: usize) -> Vec<String> {
        let mut scored: Vec<(usize, &String)> = self.ids.iter().map(|c| (edit_distance(id, c), c)).collect();
        scored.sort();
        scored.into_iter().take(k).map(|(_, c)| c.clone()).collect()
    }
}

fn edit_distance(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.chars().enumerate() {
        let mut cur = alloc::vec![i + 1; b.len() + 1];
        for j in 0..b.len() {
            let sub = prev[j] + usize::from(ca != b[j]);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}
