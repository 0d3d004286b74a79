//! Nearest-neighbour search over profane-key embeddings.
//!
//! [`LatentIndex`] is a hierarchical navigable small-world graph over
//! unit-normalized vectors scored by inner product (cosine similarity).
//! Links are kept bidirectional and every layer's degree is capped at `M`.
//! [`LatentIndex::exact_search`] is a brute-force scan with the same output
//! contract, used as ground truth.
//!
//! Keys are never removed; dropping a key means rebuilding the index.

mod hnsw;
mod persist;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use persist::INDEX_MAGIC;

use crate::chardomain::{encode_token, CharSeq, DomainError};
use crate::container::ContainerError;
use crate::encoder::linalg::Matrix;
use crate::encoder::{EncoderError, EncoderParams};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("key {0:?} is already indexed")]
    DuplicateKey(String),
    #[error("zero vector")]
    ZeroVector,
    #[error("index is empty")]
    EmptyIndex,
    #[error("vector has dimension {got}, index expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid HNSW parameters: {0}")]
    Params(String),
    #[error("token {0:?}: {1}")]
    Token(String, DomainError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("index file: {0}")]
    Persist(#[from] ContainerError),
    #[error("malformed index file: {0}")]
    Malformed(String),
    #[error("index was built from other weights (fingerprint {found:016x}, expected {expected:016x})")]
    StaleIndex { expected: u64, found: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HnswParams {
    /// Maximum links per node per layer.
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    /// Multiplier for geometric level sampling, `1 / ln(m)` by default.
    pub level_lambda: f64,
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        Self::with_m(16)
    }
}

impl HnswParams {
    pub fn with_m(m: usize) -> Self {
        Self {
            m,
            ef_construction: 200,
            ef_search: 64,
            level_lambda: 1.0 / (m.max(2) as f64).ln(),
            seed: 0x9e37_79b9,
        }
    }

    pub fn validate(&self) -> Result<(), IndexError> {
        if self.m < 2 {
            return Err(IndexError::Params(format!("m = {} < 2", self.m)));
        }
        if self.ef_search < 1 {
            return Err(IndexError::Params("ef_search must be at least 1".into()));
        }
        if self.ef_construction < self.m {
            return Err(IndexError::Params(format!(
                "ef_construction {} < m {}",
                self.ef_construction, self.m
            )));
        }
        if !(self.level_lambda > 0.0 && self.level_lambda.is_finite()) {
            return Err(IndexError::Params("level_lambda must be positive".into()));
        }
        Ok(())
    }
}

/// A search result.
#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub key: String,
    pub sim: f32,
}

/// Public view of one stored key.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry<'a> {
    pub key_token: &'a str,
    pub vector: &'a [f32],
    pub node_id: u32,
    pub level: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Node {
    key: String,
    vector: Vec<f32>,
    /// `links[layer]` for `layer in 0..=level`.
    links: Vec<Vec<u32>>,
}

impl Node {
    fn level(&self) -> usize {
        self.links.len() - 1
    }
}

/// Anything that can turn encoded tokens into embedding rows.
pub trait TokenEmbedder {
    fn embed(&self, batch: &[CharSeq]) -> Result<Matrix<f32>, EncoderError>;
}

impl TokenEmbedder for EncoderParams<f32> {
    fn embed(&self, batch: &[CharSeq]) -> Result<Matrix<f32>, EncoderError> {
        EncoderParams::embed(self, batch)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentIndex {
    dim: usize,
    params: HnswParams,
    nodes: Vec<Node>,
    by_key: HashMap<String, u32>,
    entry: Option<u32>,
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().sum::<f32>() + tail
}

/// Unit-length copy of `v`, or `ZeroVector`.
pub fn normalized(v: &[f32]) -> Result<Vec<f32>, IndexError> {
    let norm = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(IndexError::ZeroVector);
    }
    Ok(v.iter().map(|x| (*x as f64 / norm) as f32).collect())
}

fn sort_hits(hits: &mut [Hit]) {
    hits.sort_by(|a, b| b.sim.total_cmp(&a.sim).then_with(|| a.key.cmp(&b.key)));
}

impl LatentIndex {
    pub fn new(dim: usize, params: HnswParams) -> Result<Self, IndexError> {
        params.validate()?;
        if dim == 0 {
            return Err(IndexError::Params("dimension must be at least 1".into()));
        }
        Ok(Self {
            dim,
            params,
            nodes: Vec::new(),
            by_key: HashMap::new(),
            entry: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &HnswParams {
        &self.params
    }

    pub fn set_ef_search(&mut self, ef: usize) {
        self.params.ef_search = ef.max(1);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, key: &str) -> bool {
        self.by_key.contains_key(key)
    }

    pub fn entry_point(&self) -> Option<u32> {
        self.entry
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().map(|n| n.key.as_str())
    }

    pub fn entries(&self) -> impl Iterator<Item = IndexEntry<'_>> {
        self.nodes.iter().enumerate().map(|(i, n)| IndexEntry {
            key_token: &n.key,
            vector: &n.vector,
            node_id: i as u32,
            level: n.level(),
        })
    }

    fn check_dim(&self, v: &[f32]) -> Result<(), IndexError> {
        if v.len() != self.dim {
            return Err(IndexError::Dimension {
                expected: self.dim,
                got: v.len(),
            });
        }
        Ok(())
    }

    /// Inserts a key with its (not necessarily normalized) embedding.
    pub fn insert(&mut self, key: &str, vector: &[f32]) -> Result<u32, IndexError> {
        self.check_dim(vector)?;
        if self.by_key.contains_key(key) {
            return Err(IndexError::DuplicateKey(key.to_owned()));
        }
        let unit = normalized(vector)?;
        let id = self.insert_node(key.to_owned(), unit);
        self.by_key.insert(key.to_owned(), id);
        Ok(id)
    }

    /// Approximate top-`k` by cosine similarity, best first, ties by key.
    pub fn search(&self, query: &[f32], k: usize) -> Result<Vec<Hit>, IndexError> {
        self.check_dim(query)?;
        let q = normalized(query)?;
        if self.is_empty() {
            return Err(IndexError::EmptyIndex);
        }
        let ef = self.params.ef_search.max(k);
        let mut hits: Vec<Hit> = self
            .search_graph(&q, ef)
            .into_iter()
            .map(|s| Hit {
                key: self.nodes[s.id as usize].key.clone(),
                sim: s.sim.clamp(-1.0, 1.0),
            })
            .collect();
        sort_hits(&mut hits);
        hits.truncate(k);
        Ok(hits)
    }

    /// Brute-force top-`k`, same contract as [`LatentIndex::search`].
    pub fn exact_search(&self, query: &[f32], k: usize) -> Result<Vec<Hit>, IndexError> {
        self.check_dim(query)?;
        let q = normalized(query)?;
        if self.is_empty() {
            return Err(IndexError::EmptyIndex);
        }
        let mut hits: Vec<Hit> = self
            .nodes
            .iter()
            .map(|n| Hit {
                key: n.key.clone(),
                sim: dot(&q, &n.vector).clamp(-1.0, 1.0),
            })
            .collect();
        sort_hits(&mut hits);
        hits.truncate(k);
        Ok(hits)
    }

    /// Embeds `key` with a single encoder call and inserts it.
    pub fn insert_token(
        &mut self,
        key: &str,
        embedder: &impl TokenEmbedder,
    ) -> Result<u32, IndexError> {
        if self.contains(key) {
            return Err(IndexError::DuplicateKey(key.to_owned()));
        }
        let seq = encode_token(key).map_err(|e| IndexError::Token(key.to_owned(), e))?;
        let z = embedder.embed(&[seq])?;
        self.insert(key, z.row(0))
    }

    /// Builds an index over `keys`, embedding them in batches.
    pub fn build<'a>(
        keys: impl IntoIterator<Item = &'a str>,
        embedder: &impl TokenEmbedder,
        dim: usize,
        params: HnswParams,
    ) -> Result<Self, IndexError> {
        let mut index = Self::new(dim, params)?;
        let keys: Vec<&str> = keys.into_iter().collect();
        for chunk in keys.chunks(256) {
            let seqs = chunk
                .iter()
                .map(|k| encode_token(k).map_err(|e| IndexError::Token(k.to_string(), e)))
                .collect::<Result<Vec<_>, _>>()?;
            let z = embedder.embed(&seqs)?;
            for (i, key) in chunk.iter().enumerate() {
                index.insert(key, z.row(i))?;
            }
        }
        Ok(index)
    }

    /// Embeds `token`, looks up the closest key and returns it when the
    /// similarity reaches `threshold` (inclusive). An all-zero embedding
    /// has no direction and never matches.
    pub fn match_token(
        &self,
        token: &str,
        embedder: &impl TokenEmbedder,
        threshold: f32,
    ) -> Result<Option<Hit>, IndexError> {
        let seq = encode_token(token).map_err(|e| IndexError::Token(token.to_owned(), e))?;
        let z = embedder.embed(&[seq])?;
        self.match_vector(z.row(0), threshold)
    }

    /// Threshold test on a precomputed embedding.
    pub fn match_vector(&self, v: &[f32], threshold: f32) -> Result<Option<Hit>, IndexError> {
        if self.is_empty() {
            return Ok(None);
        }
        match self.search(v, 1) {
            Ok(mut hits) => Ok(hits.pop().filter(|h| h.sim >= threshold)),
            Err(IndexError::ZeroVector) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Mean number of links per node on `layer`, over nodes present there.
    pub fn mean_degree(&self, layer: usize) -> f64 {
        let degrees: Vec<usize> = self
            .nodes
            .iter()
            .filter_map(|n| n.links.get(layer).map(Vec::len))
            .collect();
        if degrees.is_empty() {
            return 0.0;
        }
        degrees.iter().sum::<usize>() as f64 / degrees.len() as f64
    }

    /// Checks link symmetry, degree caps, layer consistency, unit norms and
    /// reachability of every node from the entry point on each of its layers.
    pub fn check_integrity(&self) -> Result<(), String> {
        hnsw::check_integrity(self)
    }
}

#[cfg(test)]
mod tests;
