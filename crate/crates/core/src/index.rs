//! Block embeddings and exact top-k cosine search.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{BlockId, DocumentId};
use crate::model::{BlockType, LayoutBlock};

/// Retrieval depth used when callers do not ask for one.
pub const DEFAULT_K: usize = 5;

pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;

    fn dimension(&self) -> usize;

    fn embed(&self, text: &str) -> Result<Vec<f32>>;
}

/// Hashed character-trigram bag, L2-normalised. Deterministic and dependency-free.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReferenceEmbedder;

impl ReferenceEmbedder {
    pub const DIMENSION: usize = 256;
    pub const NAME: &'static str = "reference-trigram-256";

    fn bucket(gram: &[char]) -> usize {
        // FNV-1a over the UTF-8 bytes of the gram
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        let mut buf = [0u8; 4];
        for c in gram {
            for byte in c.encode_utf8(&mut buf).bytes() {
                hash ^= u64::from(byte);
                hash = hash.wrapping_mul(0x0100_0000_01b3);
            }
        }
        (hash % Self::DIMENSION as u64) as usize
    }

    pub fn embed_text(&self, text: &str) -> Vec<f32> {
        let normalized = text.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ");
        let mut vector = vec![0.0f32; Self::DIMENSION];
        if normalized.is_empty() {
            return vector;
        }
        let chars: Vec<char> = normalized.chars().collect();
        if chars.len() < 3 {
            vector[Self::bucket(&chars)] += 1.0;
        } else {
            for gram in chars.windows(3) {
                vector[Self::bucket(gram)] += 1.0;
            }
        }
        l2_normalize(&mut vector);
        vector
    }
}

impl Embedder for ReferenceEmbedder {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn dimension(&self) -> usize {
        Self::DIMENSION
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        Ok(self.embed_text(text))
    }
}

/// External embedding service: POST `{"text": ...}`, expects `{"vector": [...]}`.
pub struct HttpEmbedder {
    name: String,
    dimension: usize,
    endpoint: String,
    agent: ureq::Agent,
}

impl HttpEmbedder {
    pub fn new(name: impl Into<String>, dimension: usize, endpoint: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into();
        Self { name: name.into(), dimension, endpoint: endpoint.into(), agent }
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vector: Vec<f32>,
}

impl Embedder for HttpEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        if text.trim().is_empty() {
            return Ok(vec![0.0; self.dimension]);
        }
        let mut response = self
            .agent
            .post(&self.endpoint)
            .send_json(EmbedRequest { text })
            .map_err(|e| Error::adapter("http-embedder", e.to_string()))?;
        let EmbedResponse { mut vector } =
            response.body_mut().read_json().map_err(|e| Error::adapter("http-embedder", e.to_string()))?;
        if vector.len() != self.dimension {
            return Err(Error::adapter(
                "http-embedder",
                format!("expected {} dimensions, got {}", self.dimension, vector.len()),
            ));
        }
        l2_normalize(&mut vector);
        Ok(vector)
    }
}

pub fn l2_normalize(vector: &mut [f32]) {
    let norm = vector.iter().map(|v| f64::from(*v) * f64::from(*v)).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in vector.iter_mut() {
            *v = (f64::from(*v) / norm) as f32;
        }
    }
}

/// Cosine similarity clamped to [-1, 1]; zero vectors score 0.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (f64::from(*x), f64::from(*y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub block_id: BlockId,
    pub document_id: DocumentId,
    pub block_type: BlockType,
    pub vector: Vec<f32>,
    pub revision: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredBlock {
    pub block_id: BlockId,
    pub score: f64,
    pub block_type: BlockType,
    pub document_id: DocumentId,
}

/// Score descending, then block id ascending.
pub fn rank_order(a: &ScoredBlock, b: &ScoredBlock) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.block_id.cmp(&b.block_id))
}

/// Keeps the best `k` of `scored` under [`rank_order`], sorted.
pub fn top_k(mut scored: Vec<ScoredBlock>, k: usize) -> Vec<ScoredBlock> {
    if k == 0 {
        return Vec::new();
    }
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_by(rank_order);
    scored
}

#[derive(Debug, Clone, Default)]
pub struct SearchFilter<'a> {
    pub block_type: Option<BlockType>,
    pub corpus: Option<&'a BTreeSet<DocumentId>>,
}

impl SearchFilter<'_> {
    fn admits(&self, entry: &IndexEntry) -> bool {
        self.block_type.is_none_or(|t| entry.block_type == t)
            && self.corpus.is_none_or(|c| c.contains(&entry.document_id))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorIndex {
    pub embedder_name: String,
    pub dimension: usize,
    entries: BTreeMap<BlockId, IndexEntry>,
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    embedder_name: String,
    dimension: usize,
    entries: Vec<IndexEntry>,
}

impl VectorIndex {
    pub fn new(embedder_name: impl Into<String>, dimension: usize) -> Self {
        Self { embedder_name: embedder_name.into(), dimension, entries: BTreeMap::new() }
    }

    pub fn for_embedder(embedder: &dyn Embedder) -> Self {
        Self::new(embedder.name(), embedder.dimension())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, block_id: &BlockId) -> Option<&IndexEntry> {
        self.entries.get(block_id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &IndexEntry> {
        self.entries.values()
    }

    /// Block types with at least one live entry inside the filter's corpus.
    pub fn types_present(&self, corpus: Option<&BTreeSet<DocumentId>>) -> BTreeSet<BlockType> {
        self.entries
            .values()
            .filter(|e| corpus.is_none_or(|c| c.contains(&e.document_id)))
            .map(|e| e.block_type)
            .collect()
    }

    pub fn upsert(&mut self, block: &LayoutBlock, embedder: &dyn Embedder) -> Result<()> {
        if block.tombstoned {
            return Err(Error::Invalid(format!("block {} is tombstoned", block.block_id)));
        }
        if block.text_repr.trim().is_empty() {
            return Err(Error::Invalid(format!("block {} has no text to index", block.block_id)));
        }
        let vector = embedder.embed(&block.text_repr)?;
        self.upsert_entry(IndexEntry {
            block_id: block.block_id.clone(),
            document_id: block.document_id.clone(),
            block_type: block.block_type,
            vector,
            revision: block.revision,
        })
    }

    pub fn upsert_entry(&mut self, entry: IndexEntry) -> Result<()> {
        if entry.vector.len() != self.dimension {
            return Err(Error::Invalid(format!(
                "vector has {} dimensions, index expects {}",
                entry.vector.len(),
                self.dimension
            )));
        }
        self.entries.insert(entry.block_id.clone(), entry);
        Ok(())
    }

    pub fn remove(&mut self, block_id: &BlockId) -> Option<IndexEntry> {
        self.entries.remove(block_id)
    }

    /// Exact top-k by cosine over every admitted entry.
    pub fn search(&self, query: &[f32], k: usize, filter: &SearchFilter<'_>) -> Result<Vec<ScoredBlock>> {
        if k == 0 {
            return Err(Error::Invalid("k must be at least 1".into()));
        }
        if query.len() != self.dimension {
            return Err(Error::Invalid(format!(
                "query has {} dimensions, index expects {}",
                query.len(),
                self.dimension
            )));
        }
        let scored = self
            .entries
            .values()
            .filter(|e| filter.admits(e))
            .map(|e| ScoredBlock {
                block_id: e.block_id.clone(),
                score: cosine(query, &e.vector),
                block_type: e.block_type,
                document_id: e.document_id.clone(),
            })
            .collect();
        Ok(top_k(scored, k))
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let file = IndexFile {
            embedder_name: self.embedder_name.clone(),
            dimension: self.dimension,
            entries: self.entries.values().cloned().collect(),
        };
        Ok(serde_json::to_vec(&file)?)
    }

    pub fn from_json(bytes: &[u8], expected_embedder: &str) -> Result<Self> {
        let file: IndexFile = serde_json::from_slice(bytes)?;
        if file.embedder_name != expected_embedder {
            return Err(Error::EmbedderMismatch { expected: expected_embedder.to_owned(), found: file.embedder_name });
        }
        let mut index = Self::new(file.embedder_name, file.dimension);
        for entry in file.entries {
            index.upsert_entry(entry)?;
        }
        Ok(index)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::store::write_atomic(path, &self.to_json()?)
    }

    pub fn load(path: &Path, expected_embedder: &str) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&bytes, expected_embedder)
    }
}
