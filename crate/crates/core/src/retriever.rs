//! Exact top-k cosine retrieval.
//!
//! Dot products accumulate in f64 with a fixed four-lane pattern, so a score
//! depends only on the two vectors and never on how the scan was split.

use std::collections::{BTreeSet, BinaryHeap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::EmbeddingMatrix;
use crate::types::{rank_order, DocId, RankedList};

/// Rows per work unit of a chunked parallel scan.
pub const SCAN_CHUNK_ROWS: usize = 4096;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RetrieveError {
    #[error("dimension mismatch: query has {query}, store has {store}")]
    DimMismatch { query: usize, store: usize },
    #[error("zero vector{}", .0.as_ref().map(|id| format!(" for {id}")).unwrap_or_default())]
    ZeroVector(Option<DocId>),
    #[error("candidate pool is empty")]
    EmptyPool,
    #[error("pool filter names {0}, which is not in the store")]
    UnknownId(DocId),
    #[error("k must be at least 1")]
    ZeroK,
}

/// f64 dot product of two f32 vectors.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        lanes[0] += f64::from(x[0]) * f64::from(y[0]);
        lanes[1] += f64::from(x[1]) * f64::from(y[1]);
        lanes[2] += f64::from(x[2]) * f64::from(y[2]);
        lanes[3] += f64::from(x[3]) * f64::from(y[3]);
    }
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        lanes[0] += f64::from(*x) * f64::from(*y);
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3])
}

pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

fn cosine_from_parts(dot: f64, na: f64, nb: f64) -> f64 {
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64, RetrieveError> {
    if a.len() != b.len() {
        return Err(RetrieveError::DimMismatch {
            query: a.len(),
            store: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(RetrieveError::ZeroVector(None));
    }
    Ok(cosine_from_parts(dot(a, b), na, nb))
}

/// Restricts retrieval to a subset of the store. `None` means the whole store.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolFilter {
    pub allowed_ids: Option<BTreeSet<DocId>>,
}

impl PoolFilter {
    pub fn global() -> Self {
        Self { allowed_ids: None }
    }

    pub fn only(ids: impl IntoIterator<Item = DocId>) -> Self {
        Self {
            allowed_ids: Some(ids.into_iter().collect()),
        }
    }

    pub fn allows(&self, id: &DocId) -> bool {
        self.allowed_ids.as_ref().is_none_or(|s| s.contains(id))
    }

    /// Resolves the filter into sorted store row indices.
    pub fn resolve(&self, store: &EmbeddingMatrix) -> Result<Vec<usize>, RetrieveError> {
        let rows: Vec<usize> = match &self.allowed_ids {
            None => (0..store.len()).collect(),
            Some(ids) => {
                let mut rows = ids
                    .iter()
                    .map(|id| store.position(id).ok_or_else(|| RetrieveError::UnknownId(id.clone())))
                    .collect::<Result<Vec<_>, _>>()?;
                rows.sort_unstable();
                rows
            }
        };
        if rows.is_empty() {
            return Err(RetrieveError::EmptyPool);
        }
        Ok(rows)
    }
}

#[derive(Debug, Clone, Copy)]
struct Hit<'a> {
    score: f64,
    id: &'a DocId,
}

impl PartialEq for Hit<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == std::cmp::Ordering::Equal
    }
}

impl Eq for Hit<'_> {}

impl PartialOrd for Hit<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

// Greater means ranked lower, so the max-heap top is the weakest kept hit.
impl Ord for Hit<'_> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        rank_order(self.score, self.id, other.score, other.id)
    }
}

fn scan<'a>(
    q: &[f32],
    q_norm: f64,
    store: &'a EmbeddingMatrix,
    rows: &[usize],
    k: usize,
) -> Result<Vec<Hit<'a>>, RetrieveError> {
    let norms = store.norms();
    let ids = store.ids();
    let mut heap: BinaryHeap<Hit<'a>> = BinaryHeap::with_capacity(k + 1);
    for &row in rows {
        let n = norms[row];
        if n == 0.0 {
            return Err(RetrieveError::ZeroVector(Some(ids[row].clone())));
        }
        let hit = Hit {
            score: cosine_from_parts(dot(q, store.row(row)), q_norm, n),
            id: &ids[row],
        };
        if heap.len() < k {
            heap.push(hit);
        } else if let Some(mut worst) = heap.peek_mut() {
            if hit < *worst {
                *worst = hit;
            }
        }
    }
    Ok(heap.into_vec())
}

fn check_query(q: &[f32], store: &EmbeddingMatrix, k: usize) -> Result<f64, RetrieveError> {
    if k == 0 {
        return Err(RetrieveError::ZeroK);
    }
    if q.len() != store.dim() {
        return Err(RetrieveError::DimMismatch {
            query: q.len(),
            store: store.dim(),
        });
    }
    let n = norm(q);
    if n == 0.0 {
        return Err(RetrieveError::ZeroVector(None));
    }
    Ok(n)
}

fn finish(query_id: DocId, mut hits: Vec<Hit<'_>>, k: usize, pool_size: usize) -> RankedList {
    hits.sort_unstable();
    hits.truncate(k);
    RankedList::from_ordered(
        query_id,
        hits.into_iter().map(|h| (h.id.clone(), h.score)).collect(),
        pool_size,
    )
}

fn top_k_rows(
    query_id: DocId,
    q: &[f32],
    store: &EmbeddingMatrix,
    k: usize,
    rows: &[usize],
) -> Result<RankedList, RetrieveError> {
    let q_norm = check_query(q, store, k)?;
    let hits = scan(q, q_norm, store, rows, k)?;
    Ok(finish(query_id, hits, k, rows.len()))
}

/// Single-threaded exact top-k over the filtered pool.
pub fn retrieve_top_k(
    query_id: DocId,
    q: &[f32],
    store: &EmbeddingMatrix,
    k: usize,
    filter: &PoolFilter,
) -> Result<RankedList, RetrieveError> {
    let rows = filter.resolve(store)?;
    top_k_rows(query_id, q, store, k, &rows)
}

/// Exact top-k for one query, scanning fixed-size row chunks in parallel on
/// the current rayon pool. Output is identical to [`retrieve_top_k`].
pub fn retrieve_top_k_chunked(
    query_id: DocId,
    q: &[f32],
    store: &EmbeddingMatrix,
    k: usize,
    filter: &PoolFilter,
) -> Result<RankedList, RetrieveError> {
    let rows = filter.resolve(store)?;
    let q_norm = check_query(q, store, k)?;
    let partial = rows
        .par_chunks(SCAN_CHUNK_ROWS)
        .map(|chunk| scan(q, q_norm, store, chunk, k))
        .collect::<Result<Vec<_>, _>>()?;
    let hits = partial.into_iter().flatten().collect();
    Ok(finish(query_id, hits, k, rows.len()))
}

/// Retrieves for every row of `queries`, in parallel across queries. The
/// result is element-wise identical to sequential [`retrieve_top_k`] calls.
pub fn batch_retrieve(
    queries: &EmbeddingMatrix,
    store: &EmbeddingMatrix,
    k: usize,
    filter: &PoolFilter,
) -> Result<Vec<RankedList>, RetrieveError> {
    let rows = filter.resolve(store)?;
    (0..queries.len())
        .into_par_iter()
        .map(|i| top_k_rows(queries.ids()[i].clone(), queries.row(i), store, k, &rows))
        .collect()
}
