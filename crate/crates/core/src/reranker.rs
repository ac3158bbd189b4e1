//! Second-stage reranking of a retrieval list and score fusion.
//!
//! The top `depth` entries are scored by a [`Scorer`] and re-sorted by
//! `alpha * s_ret + (1 - alpha) * s_rank`; entries below the depth keep
//! their retrieval order and raw retrieval score.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scorer_gateway::{self, GatewayError, ScoreMode, ScoreRequest, Scorer};
use crate::types::{DocId, RankedList, Record};

pub const DEFAULT_RERANK_DEPTH: usize = 50;
pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RerankError {
    #[error("alpha {0} outside [0, 1]")]
    AlphaOutOfRange(f64),
    #[error("rerank depth {depth} exceeds list length {len}")]
    DepthExceedsList { depth: usize, len: usize },
    #[error("rerank depth {depth} exceeds scorer list limit {limit}")]
    DepthExceedsScorer { depth: usize, limit: usize },
    #[error("rerank depth must be at least 1")]
    ZeroDepth,
    #[error("retrieval list for {0} is empty")]
    EmptyList(DocId),
    #[error("no record for {0}")]
    MissingRecord(DocId),
    #[error("position probability {0} is negative or non-finite")]
    NegativeProbability(f64),
    #[error("position probabilities are all zero")]
    AllZero,
    #[error("scorer failed for query {query}{}: {source}", .candidate.as_ref().map(|c| format!(", candidate {c}")).unwrap_or_default())]
    Scorer {
        query: DocId,
        candidate: Option<DocId>,
        source: GatewayError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RerankMode {
    Pointwise,
    Listwise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankConfig {
    pub mode: RerankMode,
    pub depth: usize,
    pub alpha: f64,
    /// Min-max scale retrieval scores over the reranked block before fusion.
    pub normalize_ret: bool,
}

impl Default for RerankConfig {
    fn default() -> Self {
        Self {
            mode: RerankMode::Pointwise,
            depth: DEFAULT_RERANK_DEPTH,
            alpha: DEFAULT_ALPHA,
            normalize_ret: false,
        }
    }
}

pub fn fuse(s_ret: f64, s_rank: f64, alpha: f64) -> Result<f64, RerankError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(RerankError::AlphaOutOfRange(alpha));
    }
    Ok(alpha * s_ret + (1.0 - alpha) * s_rank)
}

/// Renormalizes serial-number probabilities over the listed candidates.
pub fn listwise_select(position_probs: &[f64]) -> Result<Vec<f64>, RerankError> {
    if let Some(&p) = position_probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
        return Err(RerankError::NegativeProbability(p));
    }
    let total: f64 = position_probs.iter().sum();
    if total == 0.0 {
        return Err(RerankError::AllZero);
    }
    Ok(position_probs.iter().map(|p| p / total).collect())
}

/// Index of the most probable serial number, lowest index on ties.
pub fn most_relevant(position_probs: &[f64]) -> Option<usize> {
    position_probs
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &p)| match best {
            Some((_, bp)) if bp >= p => best,
            _ => Some((i, p)),
        })
        .map(|(i, _)| i)
}

fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        values.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![1.0; values.len()]
    }
}

fn record_for<'a>(records: &'a HashMap<DocId, Record>, id: &DocId) -> Result<&'a Record, RerankError> {
    records.get(id).ok_or_else(|| RerankError::MissingRecord(id.clone()))
}

fn pointwise_scores(
    query: &Record,
    block: &[&Record],
    scorer: &dyn Scorer,
) -> Result<Vec<f64>, RerankError> {
    let scorer_err = |candidate: Option<&DocId>, source| RerankError::Scorer {
        query: query.id.clone(),
        candidate: candidate.cloned(),
        source,
    };
    let score_one = |c: &Record| -> Result<f64, RerankError> {
        let req = ScoreRequest::new(ScoreMode::Pointwise, query, vec![c.clone()])
            .map_err(|e| scorer_err(Some(&c.id), e))?;
        let resp = scorer_gateway::score(scorer, &req).map_err(|e| scorer_err(Some(&c.id), e))?;
        Ok(resp.p_yes.expect("validated pointwise response"))
    };

    let workers = scorer.max_inflight().clamp(1, block.len());
    if workers == 1 {
        return block.iter().map(|c| score_one(c)).collect();
    }
    // Results land by index, so completion order never affects the output.
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<f64, RerankError>>>> = Mutex::new(vec![None; block.len()]);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= block.len() {
                    break;
                }
                let r = score_one(block[i]);
                results.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .unwrap_or_else(|e| e.into_inner())
        .into_iter()
        .map(|r| r.expect("every index scored"))
        .collect()
}

fn listwise_scores(
    query: &Record,
    block: &[&Record],
    scorer: &dyn Scorer,
) -> Result<Vec<f64>, RerankError> {
    let scorer_err = |source| RerankError::Scorer {
        query: query.id.clone(),
        candidate: None,
        source,
    };
    let req = ScoreRequest::new(
        ScoreMode::Listwise,
        query,
        block.iter().map(|&c| c.clone()).collect(),
    )
    .map_err(scorer_err)?;
    let resp = scorer_gateway::score(scorer, &req).map_err(scorer_err)?;
    listwise_select(resp.position_probs.as_deref().expect("validated listwise response"))
}

/// Reranks the head of `retrieved`. `records` must hold a record for every
/// candidate in the reranked block.
pub fn rerank(
    query: &Record,
    retrieved: &RankedList,
    records: &HashMap<DocId, Record>,
    scorer: &dyn Scorer,
    cfg: &RerankConfig,
) -> Result<RankedList, RerankError> {
    if !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(RerankError::AlphaOutOfRange(cfg.alpha));
    }
    if cfg.depth == 0 {
        return Err(RerankError::ZeroDepth);
    }
    if retrieved.is_empty() {
        return Err(RerankError::EmptyList(retrieved.query_id.clone()));
    }
    if cfg.depth > retrieved.len() {
        return Err(RerankError::DepthExceedsList {
            depth: cfg.depth,
            len: retrieved.len(),
        });
    }
    if cfg.mode == RerankMode::Listwise {
        if let Some(limit) = scorer.max_list_len() {
            if cfg.depth > limit {
                return Err(RerankError::DepthExceedsScorer {
                    depth: cfg.depth,
                    limit,
                });
            }
        }
    }

    let (head, tail) = retrieved.entries.split_at(cfg.depth);
    let block: Vec<&Record> = head
        .iter()
        .map(|e| record_for(records, &e.id))
        .collect::<Result<_, _>>()?;
    let s_rank = match cfg.mode {
        RerankMode::Pointwise => pointwise_scores(query, &block, scorer)?,
        RerankMode::Listwise => listwise_scores(query, &block, scorer)?,
    };

    let raw: Vec<f64> = head.iter().map(|e| e.score).collect();
    let s_ret = if cfg.normalize_ret { min_max(&raw) } else { raw };

    // (fused desc, retrieval rank asc): equal fused scores keep retrieval order.
    let mut fused: Vec<(usize, f64)> = s_ret
        .iter()
        .zip(&s_rank)
        .enumerate()
        .map(|(i, (&r, &k))| Ok((i, fuse(r, k, cfg.alpha)?)))
        .collect::<Result<_, RerankError>>()?;
    fused.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let ordered = fused
        .into_iter()
        .map(|(i, s)| (head[i].id.clone(), s))
        .chain(tail.iter().map(|e| (e.id.clone(), e.score)))
        .collect();
    Ok(RankedList::from_ordered(
        retrieved.query_id.clone(),
        ordered,
        retrieved.pool_size,
    ))
}

/// Reranks every list; queries are looked up in `queries` by list query id.
pub fn rerank_all(
    queries: &HashMap<DocId, Record>,
    runs: &[RankedList],
    records: &HashMap<DocId, Record>,
    scorer: &dyn Scorer,
    cfg: &RerankConfig,
) -> Result<Vec<RankedList>, RerankError> {
    runs.iter()
        .map(|list| rerank(record_for(queries, &list.query_id)?, list, records, scorer, cfg))
        .collect()
}
