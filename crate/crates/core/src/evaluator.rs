//! Retrieval metrics, candidate-pool construction and report comparison.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::retriever::PoolFilter;
use crate::types::{DocId, RankedList};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("no relevance judgments for query {0}")]
    MissingQrels(DocId),
    #[error("query {query} has {found} candidates, expected 2")]
    WrongCandidateCount { query: DocId, found: usize },
    #[error("unknown dataset tag {0}")]
    UnknownDataset(String),
    #[error("reports are not comparable: {0}")]
    IncompatibleReports(String),
    #[error("unknown metric {0:?}")]
    UnknownMetric(String),
    #[error("metric cutoff must be at least 1")]
    ZeroCutoff,
}

/// Relevant ids per query.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Qrels {
    map: BTreeMap<DocId, BTreeSet<DocId>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query: DocId, doc: DocId) {
        self.map.entry(query).or_default().insert(doc);
    }

    pub fn relevant(&self, query: &DocId) -> Option<&BTreeSet<DocId>> {
        self.map.get(query).filter(|s| !s.is_empty())
    }

    pub fn is_relevant(&self, query: &DocId, doc: &DocId) -> bool {
        self.map.get(query).is_some_and(|s| s.contains(doc))
    }

    pub fn queries(&self) -> impl Iterator<Item = &DocId> {
        self.map.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&DocId, &BTreeSet<DocId>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

impl FromIterator<(DocId, DocId)> for Qrels {
    fn from_iter<T: IntoIterator<Item = (DocId, DocId)>>(iter: T) -> Self {
        let mut q = Qrels::new();
        for (query, doc) in iter {
            q.insert(query, doc);
        }
        q
    }
}

fn relevant_for<'a>(qrels: &'a Qrels, list: &RankedList) -> Result<&'a BTreeSet<DocId>, EvalError> {
    qrels
        .relevant(&list.query_id)
        .ok_or_else(|| EvalError::MissingQrels(list.query_id.clone()))
}

fn mean_over(
    run: &[RankedList],
    qrels: &Qrels,
    per_query: impl Fn(&RankedList, &BTreeSet<DocId>) -> f64,
) -> Result<f64, EvalError> {
    if run.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for list in run {
        total += per_query(list, relevant_for(qrels, list)?);
    }
    Ok(total / run.len() as f64)
}

/// Hit rate: fraction of queries with at least one relevant id in the top k.
pub fn recall_at_k(run: &[RankedList], qrels: &Qrels, k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroCutoff);
    }
    mean_over(run, qrels, |list, rel| {
        let hit = list.entries.iter().take(k).any(|e| rel.contains(&e.id));
        if hit {
            1.0
        } else {
            0.0
        }
    })
}

/// Fraction of each query's relevant ids found in the top k, averaged.
pub fn recall_fraction_at_k(run: &[RankedList], qrels: &Qrels, k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroCutoff);
    }
    mean_over(run, qrels, |list, rel| {
        let found = list.entries.iter().take(k).filter(|e| rel.contains(&e.id)).count();
        found as f64 / rel.len() as f64
    })
}

/// AP@k normalized by `min(|relevant|, k)`, averaged over queries.
pub fn map_at_k(run: &[RankedList], qrels: &Qrels, k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroCutoff);
    }
    mean_over(run, qrels, |list, rel| {
        let mut hits = 0usize;
        let mut sum = 0.0;
        for (i, e) in list.entries.iter().take(k).enumerate() {
            if rel.contains(&e.id) {
                hits += 1;
                sum += hits as f64 / (i + 1) as f64;
            }
        }
        sum / rel.len().min(k) as f64
    })
}

/// Two-candidate matching accuracy. Each list must hold exactly two
/// candidates; the one ranked first is the decision.
pub fn itm_accuracy(run: &[RankedList], qrels: &Qrels) -> Result<f64, EvalError> {
    let mut decisions = Vec::with_capacity(run.len());
    for list in run {
        if list.entries.len() != 2 {
            return Err(EvalError::WrongCandidateCount {
                query: list.query_id.clone(),
                found: list.entries.len(),
            });
        }
        // Entries are in engine order already; re-derive to honour the tie rule
        // for lists built elsewhere.
        let best = list
            .entries
            .iter()
            .min_by(|a, b| crate::types::rank_order(a.score, &a.id, b.score, &b.id))
            .expect("two entries");
        decisions.push((list.query_id.clone(), best.id.clone()));
    }
    decision_accuracy(&decisions, qrels)
}

/// Fraction of `(query, chosen)` decisions that pick a relevant id.
pub fn decision_accuracy(decisions: &[(DocId, DocId)], qrels: &Qrels) -> Result<f64, EvalError> {
    if decisions.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for (q, chosen) in decisions {
        let rel = qrels.relevant(q).ok_or_else(|| EvalError::MissingQrels(q.clone()))?;
        if rel.contains(chosen) {
            correct += 1;
        }
    }
    Ok(correct as f64 / decisions.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Recall(usize),
    RecallFraction(usize),
    Map(usize),
    Accuracy,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Recall(k) => write!(f, "recall@{k}"),
            Metric::RecallFraction(k) => write!(f, "recall_frac@{k}"),
            Metric::Map(k) => write!(f, "map@{k}"),
            Metric::Accuracy => f.write_str("accuracy"),
        }
    }
}

impl FromStr for Metric {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "accuracy" {
            return Ok(Metric::Accuracy);
        }
        let unknown = || EvalError::UnknownMetric(s.to_owned());
        let (name, k) = s.split_once('@').ok_or_else(unknown)?;
        let k: usize = k.parse().map_err(|_| unknown())?;
        if k == 0 {
            return Err(EvalError::ZeroCutoff);
        }
        match name {
            "recall" => Ok(Metric::Recall(k)),
            "recall_frac" => Ok(Metric::RecallFraction(k)),
            "map" => Ok(Metric::Map(k)),
            _ => Err(unknown()),
        }
    }
}

pub fn parse_metrics(list: &str) -> Result<Vec<Metric>, EvalError> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

pub fn default_metrics() -> Vec<Metric> {
    vec![Metric::Recall(1), Metric::Recall(5), Metric::Recall(10), Metric::Map(5)]
}

pub fn compute_metric(metric: Metric, run: &[RankedList], qrels: &Qrels) -> Result<f64, EvalError> {
    match metric {
        Metric::Recall(k) => recall_at_k(run, qrels, k),
        Metric::RecallFraction(k) => recall_fraction_at_k(run, qrels, k),
        Metric::Map(k) => map_at_k(run, qrels, k),
        Metric::Accuracy => itm_accuracy(run, qrels),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    pub pool_mode: String,
    pub query_count: usize,
    /// FNV-1a digest of the sorted query ids; reports are comparable only
    /// when these agree.
    pub query_fingerprint: String,
    pub metrics: BTreeMap<String, f64>,
}

pub fn query_fingerprint(run: &[RankedList]) -> String {
    let ids: BTreeSet<&DocId> = run.iter().map(|l| &l.query_id).collect();
    let mut h = crate::hashing::Fnv1a::new();
    for id in ids {
        h.write(id.as_str().as_bytes());
        h.write(&[0xff]);
    }
    format!("{:016x}", h.finish())
}

pub fn evaluate(
    run: &[RankedList],
    qrels: &Qrels,
    metrics: &[Metric],
    run_id: &str,
    pool_mode: &str,
) -> Result<EvalReport, EvalError> {
    let mut values = BTreeMap::new();
    for &m in metrics {
        values.insert(m.to_string(), compute_metric(m, run, qrels)?);
    }
    Ok(EvalReport {
        run_id: run_id.to_owned(),
        pool_mode: pool_mode.to_owned(),
        query_count: run.len(),
        query_fingerprint: query_fingerprint(run),
        metrics: values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub metric: String,
    pub a: f64,
    pub b: f64,
    /// `b - a`.
    pub delta: f64,
}

pub fn compare_runs(a: &EvalReport, b: &EvalReport) -> Result<Vec<MetricDelta>, EvalError> {
    if a.query_fingerprint != b.query_fingerprint || a.query_count != b.query_count {
        return Err(EvalError::IncompatibleReports("query sets differ".into()));
    }
    if a.metrics.keys().ne(b.metrics.keys()) {
        return Err(EvalError::IncompatibleReports("metric sets differ".into()));
    }
    Ok(a.metrics
        .iter()
        .zip(&b.metrics)
        .map(|((name, &va), (_, &vb))| MetricDelta {
            metric: name.clone(),
            a: va,
            b: vb,
            delta: vb - va,
        })
        .collect())
}

/// `metric,value` rows for table assembly.
pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("run_id,pool_mode,metric,value\n");
    for (m, v) in &report.metrics {
        out.push_str(&format!("{},{},{m},{v}\n", report.run_id, report.pool_mode));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Local,
    Global,
}

/// Which dataset each candidate belongs to, plus the pool mode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub mode: PoolMode,
    pub assignment: BTreeMap<DocId, String>,
}

pub fn build_pool(spec: &PoolSpec, for_dataset: &str) -> Result<PoolFilter, EvalError> {
    match spec.mode {
        PoolMode::Global => Ok(PoolFilter::global()),
        PoolMode::Local => {
            let ids: BTreeSet<DocId> = spec
                .assignment
                .iter()
                .filter(|(_, tag)| tag.as_str() == for_dataset)
                .map(|(id, _)| id.clone())
                .collect();
            if ids.is_empty() {
                return Err(EvalError::UnknownDataset(for_dataset.to_owned()));
            }
            Ok(PoolFilter {
                allowed_ids: Some(ids),
            })
        }
    }
}

/// Parses a `doc_id<TAB or space>dataset` assignment file.
pub fn parse_assignment(text: &str) -> Result<BTreeMap<DocId, String>, String> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next(), parts.next()) {
            (Some(id), Some(tag), None) => {
                out.insert(DocId::from(id), tag.to_owned());
            }
            _ => return Err(format!("line {}: expected `doc_id dataset`", n + 1)),
        }
    }
    Ok(out)
}
