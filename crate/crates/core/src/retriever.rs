//! Inner-product retrieval over an entity embedding index.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{DialogueContext, KnowledgeBase};
use crate::encoder::{
    read_container, write_container, EncoderError, EncoderParams, Embedding, TensorSpec,
};

#[derive(Debug, Error)]
pub enum RetrieverError {
    #[error("cannot index an empty knowledge base")]
    EmptyKb,
    #[error("vector length mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("index built with encoder version {index} but parameters are at version {params}; refresh the index")]
    StaleIndex { index: u64, params: u64 },
    #[error("unknown entity id {0}")]
    UnknownEntity(String),
    #[error("top-k requires k >= 1")]
    ZeroK,
    #[error("duplicate entity id {0}")]
    DuplicateId(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

pub type Result<T, E = RetrieverError> = std::result::Result<T, E>;

/// Row `i` holds the embedding of the `i`-th entity's linearization.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityIndex {
    entity_ids: Vec<String>,
    rows: Vec<Embedding>,
    positions: HashMap<String, usize>,
    encoder_version: u64,
}

impl EntityIndex {
    pub fn len(&self) -> usize {
        self.entity_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entity_ids.is_empty()
    }

    pub fn entity_ids(&self) -> &[String] {
        &self.entity_ids
    }

    pub fn row(&self, i: usize) -> &Embedding {
        &self.rows[i]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.positions.get(id).copied()
    }

    pub fn encoder_version(&self) -> u64 {
        self.encoder_version
    }

    /// Replaces one row without touching the version stamp. Training uses
    /// this to keep freshly encoded rows between full refreshes.
    pub(crate) fn set_row(&mut self, i: usize, row: Embedding) {
        self.rows[i] = row;
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Embedding::dim)
    }

    fn check_fresh(&self, params: &EncoderParams) -> Result<()> {
        if self.encoder_version != params.version() {
            return Err(RetrieverError::StaleIndex {
                index: self.encoder_version,
                params: params.version(),
            });
        }
        Ok(())
    }

    /// Writes the matrix in the checkpoint container format.
    pub fn dump(&self, path: impl AsRef<Path>) -> Result<()> {
        let flat: Vec<f32> = self.rows.iter().flat_map(|r| r.0.iter().map(|&x| x as f32)).collect();
        let spec = TensorSpec {
            name: "entity_embeddings".into(),
            shape: vec![self.len(), self.dim()],
        };
        let meta = serde_json::json!({
            "entity_ids": self.entity_ids,
            "encoder_version": self.encoder_version,
        });
        write_container(path.as_ref(), "index", meta, &[(spec, &flat)])?;
        Ok(())
    }

    /// Reads an index dump. Values come back rounded to `f32`.
    pub fn load_dump(path: impl AsRef<Path>) -> Result<Self> {
        let (header, tensors) = read_container(path.as_ref())?;
        let corrupt = |m: &str| RetrieverError::Encoder(EncoderError::Corrupt(m.to_string()));
        if header.kind != "index" || tensors.len() != 1 {
            return Err(corrupt("not an index dump"));
        }
        let ids: Vec<String> = serde_json::from_value(header.meta["entity_ids"].clone())
            .map_err(|_| corrupt("entity ids"))?;
        let version = header.meta["encoder_version"]
            .as_u64()
            .ok_or_else(|| corrupt("encoder version"))?;
        let dim = header.tensors[0].shape.get(1).copied().unwrap_or(0);
        if dim == 0 || ids.len() != header.tensors[0].shape[0] {
            return Err(corrupt("matrix shape"));
        }
        let rows = tensors[0]
            .chunks_exact(dim)
            .map(|c| Embedding(c.iter().map(|&x| f64::from(x)).collect()))
            .collect();
        Ok(Self::assemble(ids, rows, version))
    }

    /// An index over precomputed rows, not tied to any encoder (version 0).
    pub fn from_rows(entity_ids: Vec<String>, rows: Vec<Embedding>) -> Result<Self> {
        if entity_ids.is_empty() {
            return Err(RetrieverError::EmptyKb);
        }
        if entity_ids.len() != rows.len() {
            return Err(RetrieverError::DimensionMismatch(entity_ids.len(), rows.len()));
        }
        let dim = rows[0].dim();
        if let Some(bad) = rows.iter().find(|r| r.dim() != dim) {
            return Err(RetrieverError::DimensionMismatch(bad.dim(), dim));
        }
        let index = Self::assemble(entity_ids, rows, 0);
        if index.positions.len() != index.entity_ids.len() {
            let mut seen = std::collections::HashSet::new();
            let dup = index.entity_ids.iter().find(|id| !seen.insert(*id)).cloned().unwrap_or_default();
            return Err(RetrieverError::DuplicateId(dup));
        }
        Ok(index)
    }

    fn assemble(entity_ids: Vec<String>, rows: Vec<Embedding>, encoder_version: u64) -> Self {
        let positions = entity_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        Self {
            entity_ids,
            rows,
            positions,
            encoder_version,
        }
    }
}

pub fn build_index(kb: &KnowledgeBase, params: &EncoderParams) -> Result<EntityIndex> {
    if kb.is_empty() {
        return Err(RetrieverError::EmptyKb);
    }
    let rows = kb
        .entities()
        .iter()
        .map(|e| params.encode_text(&e.linearize()))
        .collect::<Result<Vec<_>, _>>()?;
    let ids = kb.entities().iter().map(|e| e.id().to_string()).collect();
    Ok(EntityIndex::assemble(ids, rows, params.version()))
}

/// Re-encodes the listed rows (all rows when `ids` is `None`) and stamps
/// the index with the current parameter version. The input is untouched.
pub fn refresh(
    index: &EntityIndex,
    kb: &KnowledgeBase,
    params: &EncoderParams,
    ids: Option<&[String]>,
) -> Result<EntityIndex> {
    let mut next = index.clone();
    let targets: Vec<usize> = match ids {
        Some(ids) => ids
            .iter()
            .map(|id| {
                index
                    .position(id)
                    .ok_or_else(|| RetrieverError::UnknownEntity(id.clone()))
            })
            .collect::<Result<_>>()?,
        None => (0..index.len()).collect(),
    };
    for i in targets {
        let entity = kb
            .get(&index.entity_ids[i])
            .ok_or_else(|| RetrieverError::UnknownEntity(index.entity_ids[i].clone()))?;
        next.rows[i] = params.encode_text(&entity.linearize())?;
    }
    next.encoder_version = params.version();
    Ok(next)
}

pub fn similarity(q: &Embedding, e: &Embedding) -> Result<f64> {
    if q.dim() != e.dim() {
        return Err(RetrieverError::DimensionMismatch(q.dim(), e.dim()));
    }
    Ok(dot(q.as_slice(), e.as_slice()))
}

/// Eight interleaved partial sums, combined in a fixed order.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (xa, xb) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += xa[i] * xb[i];
        }
    }
    acc.iter().sum::<f64>() + tail
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredEntity {
    pub entity_id: String,
    /// Row in the index.
    pub position: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKResult {
    pub entries: Vec<ScoredEntity>,
    /// Set when fewer than the requested K entities were available.
    pub truncated: bool,
}

impl TopKResult {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.entity_id.as_str())
    }

    /// The first `k` entries.
    pub fn prefix(&self, k: usize) -> TopKResult {
        TopKResult {
            entries: self.entries[..k.min(self.entries.len())].to_vec(),
            truncated: self.truncated || k > self.entries.len(),
        }
    }
}

/// Heap entry ordered so that the *worst* candidate sits at the top.
struct Candidate<'a> {
    score: f64,
    id: &'a str,
    position: usize,
}

impl Candidate<'_> {
    // Higher score first, then ascending id.
    fn rank_cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then_with(|| self.id.cmp(other.id))
    }
}

impl PartialEq for Candidate<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.rank_cmp(other) == Ordering::Equal
    }
}
impl Eq for Candidate<'_> {}
impl PartialOrd for Candidate<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.rank_cmp(other)
    }
}

/// Exact top-`k` of `query` against the index rows, optionally restricted
/// to the `candidates` row subset (session-level retrieval).
pub fn top_k(
    query: &Embedding,
    index: &EntityIndex,
    k: usize,
    candidates: Option<&[usize]>,
) -> Result<TopKResult> {
    if k == 0 {
        return Err(RetrieverError::ZeroK);
    }
    if !index.is_empty() && query.dim() != index.dim() {
        return Err(RetrieverError::DimensionMismatch(query.dim(), index.dim()));
    }
    let all: Vec<usize>;
    let rows: &[usize] = match candidates {
        Some(c) => c,
        None => {
            all = (0..index.len()).collect();
            &all
        }
    };
    let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
    for &i in rows {
        let cand = Candidate {
            // Adding 0.0 turns -0.0 into 0.0, so equal scores tie on id.
            score: dot(query.as_slice(), index.rows[i].as_slice()) + 0.0,
            id: &index.entity_ids[i],
            position: i,
        };
        if heap.len() < k {
            heap.push(cand);
        } else if let Some(worst) = heap.peek() {
            if cand < *worst {
                heap.pop();
                heap.push(cand);
            }
        }
    }
    let entries = heap
        .into_sorted_vec()
        .into_iter()
        .map(|c| ScoredEntity {
            entity_id: c.id.to_string(),
            position: c.position,
            score: c.score,
        })
        .collect();
    Ok(TopKResult {
        entries,
        truncated: k > rows.len(),
    })
}

pub fn retrieve(
    ctx: &DialogueContext,
    index: &EntityIndex,
    params: &EncoderParams,
    k: usize,
) -> Result<TopKResult> {
    index.check_fresh(params)?;
    let query = params.encode_text(&ctx.text())?;
    top_k(&query, index, k, None)
}

/// [`retrieve`] restricted to a subset of entity ids.
pub fn retrieve_among(
    ctx: &DialogueContext,
    index: &EntityIndex,
    params: &EncoderParams,
    k: usize,
    candidate_ids: &[String],
) -> Result<TopKResult> {
    index.check_fresh(params)?;
    let rows = candidate_ids
        .iter()
        .map(|id| {
            index
                .position(id)
                .ok_or_else(|| RetrieverError::UnknownEntity(id.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let query = params.encode_text(&ctx.text())?;
    top_k(&query, index, k, Some(&rows))
}
