//! Identifiers, records and ranked results shared by every stage of the
//! pipeline.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Opaque document or query identifier. Ordered byte-wise; that order breaks
/// score ties everywhere in the engine.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DocId(String);

impl DocId {
    pub fn new(value: impl Into<String>) -> Self {
        Self(value.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for DocId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for DocId {
    fn from(value: &str) -> Self {
        Self(value.to_owned())
    }
}

impl From<String> for DocId {
    fn from(value: String) -> Self {
        Self(value)
    }
}

impl std::borrow::Borrow<str> for DocId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
    Interleaved,
}

/// One piece of record content. Images are asset references and are never
/// decoded here.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Text(String),
    Image(String),
}

impl Segment {
    pub fn is_image(&self) -> bool {
        matches!(self, Segment::Image(_))
    }
}

/// A query or candidate as seen by the engine.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: DocId,
    pub modality: Modality,
    pub segments: Vec<Segment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RecordError {
    #[error("record id is empty")]
    EmptyId,
    #[error("record {0} has no segments")]
    EmptySegments(DocId),
    #[error("interleaved record {0} needs at least one image and one text segment")]
    InterleavedMissingModality(DocId),
    #[error("record {id} is declared {modality:?} but carries a {found} segment")]
    ModalityMismatch {
        id: DocId,
        modality: Modality,
        found: &'static str,
    },
}

impl Record {
    pub fn text(id: impl Into<DocId>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            modality: Modality::Text,
            segments: vec![Segment::Text(text.into())],
            instruction: None,
        }
    }

    pub fn image(id: impl Into<DocId>, asset: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            modality: Modality::Image,
            segments: vec![Segment::Image(asset.into())],
            instruction: None,
        }
    }

    pub fn with_instruction(mut self, instruction: impl Into<String>) -> Self {
        self.instruction = Some(instruction.into());
        self
    }

    pub fn image_count(&self) -> usize {
        self.segments.iter().filter(|s| s.is_image()).count()
    }

    pub fn validate(&self) -> Result<(), RecordError> {
        validate_record(self)
    }
}

pub fn validate_record(r: &Record) -> Result<(), RecordError> {
    if r.id.is_empty() {
        return Err(RecordError::EmptyId);
    }
    if r.segments.is_empty() {
        return Err(RecordError::EmptySegments(r.id.clone()));
    }
    let images = r.image_count();
    let texts = r.segments.len() - images;
    match r.modality {
        Modality::Interleaved if images == 0 || texts == 0 => {
            Err(RecordError::InterleavedMissingModality(r.id.clone()))
        }
        Modality::Text if images > 0 => Err(RecordError::ModalityMismatch {
            id: r.id.clone(),
            modality: r.modality,
            found: "image",
        }),
        Modality::Image if texts > 0 => Err(RecordError::ModalityMismatch {
            id: r.id.clone(),
            modality: r.modality,
            found: "text",
        }),
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub id: DocId,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

/// Engine-wide result order: score descending, then id ascending.
pub fn rank_order(a_score: f64, a_id: &DocId, b_score: f64, b_id: &DocId) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_id.cmp(b_id))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: DocId,
    pub entries: Vec<ScoredCandidate>,
    pub pool_size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RankedListError {
    #[error("duplicate candidate {0} in ranked list")]
    DuplicateId(DocId),
    #[error("ranked list holds {entries} entries but pool size is {pool_size}")]
    ExceedsPool { entries: usize, pool_size: usize },
    #[error("rank {found} at position {position} (ranks must be 1..K contiguous)")]
    BadRank { position: usize, found: usize },
}

impl RankedList {
    /// Sorts `(id, score)` pairs by the engine order and assigns ranks.
    pub fn from_scores(
        query_id: DocId,
        mut scored: Vec<(DocId, f64)>,
        pool_size: usize,
    ) -> Self {
        scored.sort_by(|a, b| rank_order(a.1, &a.0, b.1, &b.0));
        Self::from_ordered(query_id, scored, pool_size)
    }

    /// Assigns ranks to `(id, score)` pairs in the given order.
    pub fn from_ordered(query_id: DocId, ordered: Vec<(DocId, f64)>, pool_size: usize) -> Self {
        let entries = ordered
            .into_iter()
            .enumerate()
            .map(|(i, (id, score))| ScoredCandidate {
                id,
                score,
                rank: i + 1,
            })
            .collect();
        Self {
            query_id,
            entries,
            pool_size,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &DocId> {
        self.entries.iter().map(|e| &e.id)
    }

    /// Checks the structural invariants: distinct ids, contiguous ranks and
    /// no more entries than the pool holds.
    pub fn check(&self) -> Result<(), RankedListError> {
        if self.entries.len() > self.pool_size {
            return Err(RankedListError::ExceedsPool {
                entries: self.entries.len(),
                pool_size: self.pool_size,
            });
        }
        let mut seen = std::collections::HashSet::with_capacity(self.entries.len());
        for (i, e) in self.entries.iter().enumerate() {
            if e.rank != i + 1 {
                return Err(RankedListError::BadRank {
                    position: i,
                    found: e.rank,
                });
            }
            if !seen.insert(&e.id) {
                return Err(RankedListError::DuplicateId(e.id.clone()));
            }
        }
        Ok(())
    }
}
