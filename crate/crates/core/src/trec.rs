//! TREC run and qrels text formats, plus JSON-lines helpers.
//!
//! Run lines: `query_id Q0 doc_id rank score run_tag`, score with six
//! decimals. Qrels lines: `query_id 0 doc_id relevance`; relevance 0 lines
//! are read but not counted as relevant.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::evaluator::Qrels;
use crate::types::{DocId, RankedList, ScoredCandidate};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {reason}")]
pub struct ParseError {
    pub line: usize,
    pub reason: String,
}

fn perr(line: usize, reason: impl Into<String>) -> ParseError {
    ParseError {
        line,
        reason: reason.into(),
    }
}

pub fn format_run(lists: &[RankedList], run_tag: &str) -> String {
    let mut out = String::new();
    for list in lists {
        for e in &list.entries {
            writeln!(
                out,
                "{} Q0 {} {} {:.6} {}",
                list.query_id, e.id, e.rank, e.score, run_tag
            )
            .expect("writing to a String");
        }
    }
    out
}

/// Parses a run file. Queries keep their first-appearance order; entries are
/// ordered by rank, which is authoritative over score. Pool size is not part
/// of the format and is set to the entry count.
pub fn parse_run(text: &str) -> Result<Vec<RankedList>, ParseError> {
    let mut order: Vec<DocId> = Vec::new();
    let mut by_query: BTreeMap<DocId, Vec<ScoredCandidate>> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let n = n + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(perr(n, format!("expected 6 fields, found {}", f.len())));
        }
        let rank: usize = f[3].parse().map_err(|_| perr(n, "bad rank"))?;
        if rank == 0 {
            return Err(perr(n, "rank must be 1-based"));
        }
        let score: f64 = f[4].parse().map_err(|_| perr(n, "bad score"))?;
        let q = DocId::from(f[0]);
        let entries = by_query.entry(q.clone()).or_insert_with(|| {
            order.push(q);
            Vec::new()
        });
        entries.push(ScoredCandidate {
            id: DocId::from(f[2]),
            score,
            rank,
        });
    }
    order
        .into_iter()
        .map(|q| {
            let mut entries = by_query.remove(&q).unwrap_or_default();
            entries.sort_by_key(|e| e.rank);
            let list = RankedList {
                pool_size: entries.len(),
                query_id: q,
                entries,
            };
            list.check().map_err(|e| perr(0, format!("query {}: {e}", list.query_id)))?;
            Ok(list)
        })
        .collect()
}

pub fn format_qrels(qrels: &Qrels) -> String {
    let mut out = String::new();
    for (q, docs) in qrels.iter() {
        for d in docs {
            writeln!(out, "{q} 0 {d} 1").expect("writing to a String");
        }
    }
    out
}

pub fn parse_qrels(text: &str) -> Result<Qrels, ParseError> {
    let mut qrels = Qrels::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(perr(n + 1, format!("expected 4 fields, found {}", f.len())));
        }
        let rel: i64 = f[3].parse().map_err(|_| perr(n + 1, "bad relevance"))?;
        if rel > 0 {
            qrels.insert(DocId::from(f[0]), DocId::from(f[2]));
        }
    }
    Ok(qrels)
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("serializable"));
        out.push('\n');
    }
    out
}

pub fn from_jsonl<T: DeserializeOwned>(text: &str) -> Result<Vec<T>, ParseError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| perr(n + 1, e.to_string())))
        .collect()
}
