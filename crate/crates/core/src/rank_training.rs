//! Reranker training data and objectives.
//!
//! Hard negatives come from the retriever's top results with relevant ids
//! removed. Each query yields one YES/NO pointwise pair and one listwise
//! sample of `M` negatives (`M` uniform in 2..=5) with the ground truth
//! inserted at a uniform position. The combined objective is
//! `w_point * L_point + w_list * L_list`.
//!
//! [`ToyScorer`] is a bilinear model `s(q, c) = q^T A c`: the pointwise logits
//! are `(s + b_yes, b_no)` and the listwise logits are `s(q, c_i)` per slot.

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluator::Qrels;
use crate::retriever::{batch_retrieve, PoolFilter, RetrieveError};
use crate::scorer_gateway::{GatewayError, ScoreMode, ScoreRequest, ScoreResponse, Scorer};
use crate::store::EmbeddingMatrix;
use crate::types::DocId;

pub const DEFAULT_MINING_DEPTH: usize = 100;
pub const MIN_LIST_NEGATIVES: usize = 2;
pub const MAX_LIST_NEGATIVES: usize = 5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RankTrainingError {
    #[error("no relevance judgments for query {0}")]
    MissingQrels(DocId),
    #[error("no negatives available for query {0}")]
    NoNegativesAvailable(DocId),
    #[error("query {query} has {found} negatives, listwise sampling needs {MAX_LIST_NEGATIVES}")]
    InsufficientNegatives { query: DocId, found: usize },
    #[error("unknown id {0}")]
    UnknownId(DocId),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("embedding dimension {found} does not match scorer dimension {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Retrieve(#[from] RetrieveError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardNegativeSet {
    pub query_id: DocId,
    /// In retrieval rank order.
    pub negatives: Vec<DocId>,
    pub depth: usize,
}

/// Retrieves the top `depth` candidates per query and drops relevant ids.
pub fn mine_hard_negatives(
    queries: &EmbeddingMatrix,
    store: &EmbeddingMatrix,
    qrels: &Qrels,
    depth: usize,
    filter: &PoolFilter,
) -> Result<Vec<HardNegativeSet>, RankTrainingError> {
    if let Some(q) = queries.ids().iter().find(|q| qrels.relevant(q).is_none()) {
        return Err(RankTrainingError::MissingQrels(q.clone()));
    }
    let lists = batch_retrieve(queries, store, depth, filter)?;
    Ok(lists
        .into_iter()
        .map(|list| {
            let negatives = list
                .entries
                .into_iter()
                .map(|e| e.id)
                .filter(|id| !qrels.is_relevant(&list.query_id, id))
                .collect();
            HardNegativeSet {
                query_id: list.query_id,
                negatives,
                depth,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Label {
    Yes,
    No,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointwisePair {
    pub query_id: DocId,
    pub candidate_id: DocId,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListwiseSample {
    pub query_id: DocId,
    pub candidates: Vec<DocId>,
    /// 0-based index of the ground truth in `candidates`.
    pub gt_position: usize,
}

fn ground_truth<'a>(qrels: &'a Qrels, query: &DocId) -> Result<&'a DocId, RankTrainingError> {
    // Lowest id when several are relevant.
    qrels
        .relevant(query)
        .and_then(|s| s.iter().next())
        .ok_or_else(|| RankTrainingError::MissingQrels(query.clone()))
}

/// One YES pair with the ground truth and one NO pair with a uniformly drawn
/// negative.
pub fn assemble_pointwise<R: Rng + ?Sized>(
    query_id: &DocId,
    qrels: &Qrels,
    negs: &HardNegativeSet,
    rng: &mut R,
) -> Result<(PointwisePair, PointwisePair), RankTrainingError> {
    let gt = ground_truth(qrels, query_id)?;
    let neg = negs
        .negatives
        .choose(rng)
        .ok_or_else(|| RankTrainingError::NoNegativesAvailable(query_id.clone()))?;
    Ok((
        PointwisePair {
            query_id: query_id.clone(),
            candidate_id: gt.clone(),
            label: Label::Yes,
        },
        PointwisePair {
            query_id: query_id.clone(),
            candidate_id: neg.clone(),
            label: Label::No,
        },
    ))
}

/// `M` negatives drawn without replacement, ground truth inserted at a
/// uniform position in `0..=M`.
pub fn assemble_listwise<R: Rng + ?Sized>(
    query_id: &DocId,
    qrels: &Qrels,
    negs: &HardNegativeSet,
    rng: &mut R,
) -> Result<ListwiseSample, RankTrainingError> {
    let gt = ground_truth(qrels, query_id)?;
    if negs.negatives.len() < MAX_LIST_NEGATIVES {
        return Err(RankTrainingError::InsufficientNegatives {
            query: query_id.clone(),
            found: negs.negatives.len(),
        });
    }
    let m = rng.gen_range(MIN_LIST_NEGATIVES..=MAX_LIST_NEGATIVES);
    let mut candidates: Vec<DocId> = rand::seq::index::sample(rng, negs.negatives.len(), m)
        .into_iter()
        .map(|i| negs.negatives[i].clone())
        .collect();
    let gt_position = rng.gen_range(0..=m);
    candidates.insert(gt_position, gt.clone());
    Ok(ListwiseSample {
        query_id: query_id.clone(),
        candidates,
        gt_position,
    })
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-log softmax(logits)[target]`, log-sum-exp stabilized.
pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

/// Bilinear relevance model used as a trainable stand-in reranker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyScorer {
    pub bilinear: Array2<f64>,
    pub bias_yes: f64,
    pub bias_no: f64,
}

impl ToyScorer {
    pub fn zeros(dim: usize) -> Self {
        Self {
            bilinear: Array2::zeros((dim, dim)),
            bias_yes: 0.0,
            bias_no: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.bilinear.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.bilinear.len() + 2
    }

    /// Flattened parameters: `A` row-major, then `b_yes`, `b_no`.
    pub fn params(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.bilinear.iter().copied().collect();
        p.push(self.bias_yes);
        p.push(self.bias_no);
        p
    }

    pub fn from_params(dim: usize, params: &[f64]) -> Self {
        assert_eq!(params.len(), dim * dim + 2, "parameter count");
        Self {
            bilinear: Array2::from_shape_vec((dim, dim), params[..dim * dim].to_vec())
                .expect("square"),
            bias_yes: params[dim * dim],
            bias_no: params[dim * dim + 1],
        }
    }

    pub fn bilinear_score(&self, q: ArrayView1<f64>, c: ArrayView1<f64>) -> f64 {
        q.dot(&self.bilinear.dot(&c))
    }

    /// `[YES, NO]` logits.
    pub fn pointwise_logits(&self, q: ArrayView1<f64>, c: ArrayView1<f64>) -> [f64; 2] {
        [self.bilinear_score(q, c) + self.bias_yes, self.bias_no]
    }

    pub fn listwise_logits(&self, q: ArrayView1<f64>, cs: &[ArrayView1<f64>]) -> Vec<f64> {
        let qa = q.dot(&self.bilinear);
        cs.iter().map(|c| qa.dot(c)).collect()
    }

    pub fn p_yes(&self, q: ArrayView1<f64>, c: ArrayView1<f64>) -> f64 {
        softmax(&self.pointwise_logits(q, c))[0]
    }

    fn scaled_add(&mut self, alpha: f64, other: &ToyScorer) {
        self.bilinear.scaled_add(alpha, &other.bilinear);
        self.bias_yes += alpha * other.bias_yes;
        self.bias_no += alpha * other.bias_no;
    }
}

fn embedding(emb: &EmbeddingMatrix, id: &DocId, dim: usize) -> Result<Array1<f64>, RankTrainingError> {
    let row = emb
        .lookup(id)
        .map_err(|_| RankTrainingError::UnknownId(id.clone()))?;
    if row.len() != dim {
        return Err(RankTrainingError::DimMismatch {
            expected: dim,
            found: row.len(),
        });
    }
    Ok(row.iter().map(|&v| f64::from(v)).collect())
}

fn outer_add(acc: &mut Array2<f64>, weight: f64, q: &Array1<f64>, c: &Array1<f64>) {
    for (i, &qi) in q.iter().enumerate() {
        let w = weight * qi;
        acc.row_mut(i).scaled_add(w, c);
    }
}

fn pair_loss_grad(
    scorer: &ToyScorer,
    pair: &PointwisePair,
    emb: &EmbeddingMatrix,
    grad: Option<&mut ToyScorer>,
) -> Result<f64, RankTrainingError> {
    let q = embedding(emb, &pair.query_id, scorer.dim())?;
    let c = embedding(emb, &pair.candidate_id, scorer.dim())?;
    let logits = scorer.pointwise_logits(q.view(), c.view());
    let target = match pair.label {
        Label::Yes => 0,
        Label::No => 1,
    };
    if let Some(g) = grad {
        let mut p = softmax(&logits);
        p[target] -= 1.0;
        outer_add(&mut g.bilinear, p[0], &q, &c);
        g.bias_yes += p[0];
        g.bias_no += p[1];
    }
    Ok(cross_entropy(&logits, target))
}

/// `CE(YES, scorer(q, c_pos)) + CE(NO, scorer(q, c_neg))`.
pub fn pointwise_loss(
    scorer: &ToyScorer,
    yes: &PointwisePair,
    no: &PointwisePair,
    emb: &EmbeddingMatrix,
) -> Result<f64, RankTrainingError> {
    Ok(pair_loss_grad(scorer, yes, emb, None)? + pair_loss_grad(scorer, no, emb, None)?)
}

pub fn pointwise_loss_grad(
    scorer: &ToyScorer,
    yes: &PointwisePair,
    no: &PointwisePair,
    emb: &EmbeddingMatrix,
) -> Result<(f64, ToyScorer), RankTrainingError> {
    let mut g = ToyScorer::zeros(scorer.dim());
    let loss = pair_loss_grad(scorer, yes, emb, Some(&mut g))?
        + pair_loss_grad(scorer, no, emb, Some(&mut g))?;
    Ok((loss, g))
}

fn list_loss_grad(
    scorer: &ToyScorer,
    sample: &ListwiseSample,
    emb: &EmbeddingMatrix,
    grad: Option<&mut ToyScorer>,
) -> Result<f64, RankTrainingError> {
    let q = embedding(emb, &sample.query_id, scorer.dim())?;
    let cs = sample
        .candidates
        .iter()
        .map(|id| embedding(emb, id, scorer.dim()))
        .collect::<Result<Vec<_>, _>>()?;
    let views: Vec<_> = cs.iter().map(|c| c.view()).collect();
    let logits = scorer.listwise_logits(q.view(), &views);
    if let Some(g) = grad {
        let mut p = softmax(&logits);
        p[sample.gt_position] -= 1.0;
        for (c, &w) in cs.iter().zip(&p) {
            outer_add(&mut g.bilinear, w, &q, c);
        }
    }
    Ok(cross_entropy(&logits, sample.gt_position))
}

/// `(M+1)`-way cross-entropy of the ground-truth position.
pub fn listwise_loss(
    scorer: &ToyScorer,
    sample: &ListwiseSample,
    emb: &EmbeddingMatrix,
) -> Result<f64, RankTrainingError> {
    list_loss_grad(scorer, sample, emb, None)
}

pub fn listwise_loss_grad(
    scorer: &ToyScorer,
    sample: &ListwiseSample,
    emb: &EmbeddingMatrix,
) -> Result<(f64, ToyScorer), RankTrainingError> {
    let mut g = ToyScorer::zeros(scorer.dim());
    let loss = list_loss_grad(scorer, sample, emb, Some(&mut g))?;
    Ok((loss, g))
}

pub fn rank_loss(point: f64, list: f64, w_point: f64, w_list: f64) -> f64 {
    w_point * point + w_list * list
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankTrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub point_weight: f64,
    pub list_weight: f64,
}

impl Default for RerankTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            epochs: 30,
            batch_size: 16,
            seed: 0,
            point_weight: 1.0,
            list_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub point: f64,
    pub list: f64,
    pub rank: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankOutcome {
    pub scorer: ToyScorer,
    pub trace: Vec<EpochLoss>,
}

/// Seeded mini-batch gradient descent on the combined ranking loss. Every
/// epoch draws one pointwise pair and, when at least five negatives exist,
/// one listwise sample per query.
pub fn train_reranker(
    negatives: &[HardNegativeSet],
    qrels: &Qrels,
    init: ToyScorer,
    emb: &EmbeddingMatrix,
    cfg: &RerankTrainConfig,
) -> Result<RerankOutcome, RankTrainingError> {
    let usable: Vec<&HardNegativeSet> =
        negatives.iter().filter(|n| !n.negatives.is_empty()).collect();
    if usable.is_empty() {
        return Err(RankTrainingError::EmptyDataset);
    }
    if !(cfg.learning_rate > 0.0) || cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(RankTrainingError::InvalidConfig(
            "learning_rate, epochs and batch_size must be positive".into(),
        ));
    }
    if cfg.point_weight < 0.0 || cfg.list_weight < 0.0 {
        return Err(RankTrainingError::InvalidConfig("loss weights must be non-negative".into()));
    }

    let mut scorer = init;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum_point, mut n_point, mut sum_list, mut n_list) = (0.0, 0usize, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut grad = ToyScorer::zeros(scorer.dim());
            for &i in chunk {
                let negs = usable[i];
                let (yes, no) = assemble_pointwise(&negs.query_id, qrels, negs, &mut rng)?;
                let (lp, gp) = pointwise_loss_grad(&scorer, &yes, &no, emb)?;
                grad.scaled_add(cfg.point_weight, &gp);
                sum_point += lp;
                n_point += 1;
                if negs.negatives.len() >= MAX_LIST_NEGATIVES {
                    let sample = assemble_listwise(&negs.query_id, qrels, negs, &mut rng)?;
                    let (ll, gl) = listwise_loss_grad(&scorer, &sample, emb)?;
                    grad.scaled_add(cfg.list_weight, &gl);
                    sum_list += ll;
                    n_list += 1;
                }
            }
            scorer.scaled_add(-cfg.learning_rate / chunk.len() as f64, &grad);
        }
        let point = sum_point / n_point as f64;
        let list = if n_list > 0 { sum_list / n_list as f64 } else { 0.0 };
        trace.push(EpochLoss {
            epoch,
            point,
            list,
            rank: rank_loss(point, list, cfg.point_weight, cfg.list_weight),
        });
    }
    Ok(RerankOutcome { scorer, trace })
}

pub fn rerank_trace_csv(trace: &[EpochLoss]) -> String {
    let mut out = String::from("epoch,point_loss,list_loss,rank_loss\n");
    for t in trace {
        out.push_str(&format!("{},{},{},{}\n", t.epoch, t.point, t.list, t.rank));
    }
    out
}

/// Feature matrix the toy scorer reads: the given stores concatenated and
/// L2-normalized row by row.
pub fn scorer_features(parts: &[&EmbeddingMatrix]) -> Result<EmbeddingMatrix, crate::store::StoreError> {
    crate::store::l2_normalize(&EmbeddingMatrix::concat(parts)?)
}

/// Serves a trained [`ToyScorer`] through the scorer interface. Queries and
/// candidates are looked up by id in `embeddings`.
pub struct ToyScorerService {
    pub scorer: ToyScorer,
    pub embeddings: EmbeddingMatrix,
}

impl ToyScorerService {
    fn vector(&self, id: &DocId) -> Result<Array1<f64>, GatewayError> {
        embedding(&self.embeddings, id, self.scorer.dim()).map_err(|e| GatewayError::Scorer(e.to_string()))
    }
}

impl Scorer for ToyScorerService {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, GatewayError> {
        let q = self.vector(&req.query.record.id)?;
        let cs = req
            .candidate_ids()
            .map(|id| self.vector(id))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(match req.mode {
            ScoreMode::Pointwise => ScoreResponse::pointwise(&req.request_id, self.scorer.p_yes(q.view(), cs[0].view())),
            ScoreMode::Listwise => {
                let views: Vec<_> = cs.iter().map(|c| c.view()).collect();
                ScoreResponse::listwise(&req.request_id, softmax(&self.scorer.listwise_logits(q.view(), &views)))
            }
        })
    }

    fn name(&self) -> String {
        "toy".into()
    }

    // In-process and cheap; threads would only add overhead.
    fn max_inflight(&self) -> usize {
        1
    }
}
