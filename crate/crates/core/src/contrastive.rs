//! InfoNCE over cosine similarities with in-batch negatives, and a linear
//! projection head trained against it.
//!
//! For a batch of `B` aligned query/positive rows the loss is
//!
//! ```text
//! L = -(1/B) * sum_n log( exp(cos(q_n, c_n)/t) / sum_m exp(cos(q_n, c_m)/t) )
//! ```
//!
//! The head maps `x -> normalize(x W)`. Both pre-training and instruction
//! tuning are pair datasets fed to the same objective.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{EmbeddingMatrix, StoreError};
use crate::types::DocId;

pub const DEFAULT_TEMPERATURE: f64 = 0.05;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ContrastiveError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("zero vector in row {0}")]
    ZeroVector(usize),
    #[error("unknown id {0}")]
    UnknownId(DocId),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("store error: {0}")]
    Store(String),
}

impl From<StoreError> for ContrastiveError {
    fn from(e: StoreError) -> Self {
        ContrastiveError::Store(e.to_string())
    }
}

/// Row-aligned query and positive embeddings plus the temperature.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub queries: Array2<f64>,
    pub candidates: Array2<f64>,
    pub temperature: f64,
}

impl ContrastiveBatch {
    pub fn new(
        queries: Array2<f64>,
        candidates: Array2<f64>,
        temperature: f64,
    ) -> Result<Self, ContrastiveError> {
        if queries.dim() != candidates.dim() {
            return Err(ContrastiveError::DimMismatch(format!(
                "queries {:?} vs candidates {:?}",
                queries.dim(),
                candidates.dim()
            )));
        }
        if !(temperature > 0.0) {
            return Err(ContrastiveError::NonPositiveTemperature(temperature));
        }
        Ok(Self {
            queries,
            candidates,
            temperature,
        })
    }

    pub fn len(&self) -> usize {
        self.queries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.nrows() == 0
    }
}

fn normalize_rows(x: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>), ContrastiveError> {
    let norms: Array1<f64> = x.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if let Some(row) = norms.iter().position(|&n| n == 0.0) {
        return Err(ContrastiveError::ZeroVector(row));
    }
    let u = &x / &norms.view().insert_axis(Axis(1));
    Ok((u, norms))
}

/// Loss and its gradients with respect to the un-normalized inputs.
struct LossGrad {
    loss: f64,
    d_queries: Array2<f64>,
    d_candidates: Array2<f64>,
}

fn loss_and_input_grads(
    queries: ArrayView2<f64>,
    candidates: ArrayView2<f64>,
    temperature: f64,
    want_grad: bool,
) -> Result<LossGrad, ContrastiveError> {
    let b = queries.nrows();
    let (uq, nq) = normalize_rows(queries)?;
    let (uc, nc) = normalize_rows(candidates)?;
    let logits = uq.dot(&uc.t()) / temperature;

    let mut loss = 0.0;
    let mut g = Array2::<f64>::zeros((b, b));
    for (n, row) in logits.outer_iter().enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[n];
        if want_grad {
            for (m, &v) in row.iter().enumerate() {
                g[[n, m]] = ((v - lse).exp() - if m == n { 1.0 } else { 0.0 }) / b as f64;
            }
        }
    }
    loss /= b as f64;

    if !want_grad {
        return Ok(LossGrad {
            loss,
            d_queries: Array2::zeros((0, 0)),
            d_candidates: Array2::zeros((0, 0)),
        });
    }

    let du_q = g.dot(&uc) / temperature;
    let du_c = g.t().dot(&uq) / temperature;
    Ok(LossGrad {
        loss,
        d_queries: through_normalization(&uq, &nq, du_q),
        d_candidates: through_normalization(&uc, &nc, du_c),
    })
}

// d/dx of x/|x| applied to an upstream gradient, row by row.
fn through_normalization(u: &Array2<f64>, norms: &Array1<f64>, mut du: Array2<f64>) -> Array2<f64> {
    for ((mut g, u), &n) in du.outer_iter_mut().zip(u.outer_iter()).zip(norms) {
        let along = g.dot(&u);
        g.zip_mut_with(&u, |gi, &ui| *gi = (*gi - ui * along) / n);
    }
    du
}

pub fn info_nce_loss(batch: &ContrastiveBatch) -> Result<f64, ContrastiveError> {
    Ok(loss_and_input_grads(
        batch.queries.view(),
        batch.candidates.view(),
        batch.temperature,
        false,
    )?
    .loss)
}

/// Linear map followed by L2 normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHead {
    pub weights: Array2<f64>,
}

impl ProjectionHead {
    pub fn identity(dim: usize) -> Self {
        Self {
            weights: Array2::eye(dim),
        }
    }

    /// The first `out_dim` columns of the identity.
    pub fn truncated_identity(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weights: Array2::eye(in_dim).slice(s![.., ..out_dim]).to_owned(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn project(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, ContrastiveError> {
        if x.ncols() != self.in_dim() {
            return Err(ContrastiveError::DimMismatch(format!(
                "input dim {} vs head input {}",
                x.ncols(),
                self.in_dim()
            )));
        }
        Ok(normalize_rows(x.dot(&self.weights).view())?.0)
    }

    /// Projects every row of a store into a new, unit-normalized store.
    pub fn project_matrix(&self, m: &EmbeddingMatrix) -> Result<EmbeddingMatrix, ContrastiveError> {
        let x = to_f64(m);
        let p = self.project(x.view())?;
        let data = p.iter().map(|&v| v as f32).collect();
        Ok(EmbeddingMatrix::new(self.out_dim(), m.ids().to_vec(), data)?)
    }
}

pub fn to_f64(m: &EmbeddingMatrix) -> Array2<f64> {
    Array2::from_shape_vec(
        (m.len(), m.dim()),
        m.data().iter().map(|&v| f64::from(v)).collect(),
    )
    .expect("shape matches data")
}

/// Loss of the projected batch and its gradient with respect to the head
/// weights.
pub fn info_nce_grad(
    batch: &ContrastiveBatch,
    head: &ProjectionHead,
) -> Result<(f64, Array2<f64>), ContrastiveError> {
    if batch.queries.ncols() != head.in_dim() {
        return Err(ContrastiveError::DimMismatch(format!(
            "batch dim {} vs head input {}",
            batch.queries.ncols(),
            head.in_dim()
        )));
    }
    let pq = batch.queries.dot(&head.weights);
    let pc = batch.candidates.dot(&head.weights);
    let lg = loss_and_input_grads(pq.view(), pc.view(), batch.temperature, true)?;
    let grad = batch.queries.t().dot(&lg.d_queries) + batch.candidates.t().dot(&lg.d_candidates);
    Ok((lg.loss, grad))
}

/// Loss of the batch after projection through `head`.
pub fn projected_loss(batch: &ContrastiveBatch, head: &ProjectionHead) -> Result<f64, ContrastiveError> {
    let pq = batch.queries.dot(&head.weights);
    let pc = batch.candidates.dot(&head.weights);
    Ok(loss_and_input_grads(pq.view(), pc.view(), batch.temperature, false)?.loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Instruction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainPair {
    pub query_id: DocId,
    pub positive_id: DocId,
    pub stage: Stage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub temperature: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Output dimension; `None` keeps the input dimension.
    pub out_dim: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            learning_rate: DEFAULT_LEARNING_RATE,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            out_dim: None,
        }
    }
}

impl TrainConfig {
    fn validate(&self, in_dim: usize) -> Result<(), ContrastiveError> {
        if !(self.temperature > 0.0) {
            return Err(ContrastiveError::NonPositiveTemperature(self.temperature));
        }
        if !(self.learning_rate > 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(ContrastiveError::InvalidConfig(
                "learning_rate, epochs and batch_size must be positive".into(),
            ));
        }
        match self.out_dim {
            Some(d) if d == 0 || d > in_dim => Err(ContrastiveError::InvalidConfig(format!(
                "out_dim {d} must be in 1..={in_dim}"
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub head: ProjectionHead,
    /// Mean batch loss per epoch.
    pub trace: Vec<f64>,
}

/// Seeded mini-batch gradient descent on the projection head. The head
/// starts at the (truncated) identity.
pub fn train_projection(
    pairs: &[TrainPair],
    base: &EmbeddingMatrix,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, ContrastiveError> {
    if pairs.is_empty() {
        return Err(ContrastiveError::EmptyDataset);
    }
    let dim = base.dim();
    cfg.validate(dim)?;
    let rows: Vec<(usize, usize)> = pairs
        .iter()
        .map(|p| {
            let q = base
                .position(&p.query_id)
                .ok_or_else(|| ContrastiveError::UnknownId(p.query_id.clone()))?;
            let c = base
                .position(&p.positive_id)
                .ok_or_else(|| ContrastiveError::UnknownId(p.positive_id.clone()))?;
            Ok((q, c))
        })
        .collect::<Result<_, ContrastiveError>>()?;

    let x = to_f64(base);
    let mut head = ProjectionHead::truncated_identity(dim, cfg.out_dim.unwrap_or(dim));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let qi: Vec<usize> = chunk.iter().map(|&i| rows[i].0).collect();
            let ci: Vec<usize> = chunk.iter().map(|&i| rows[i].1).collect();
            let batch = ContrastiveBatch::new(
                x.select(Axis(0), &qi),
                x.select(Axis(0), &ci),
                cfg.temperature,
            )?;
            let (loss, grad) = info_nce_grad(&batch, &head)?;
            head.weights.scaled_add(-cfg.learning_rate, &grad);
            total += loss;
            batches += 1;
        }
        trace.push(total / batches as f64);
    }
    Ok(TrainOutcome { head, trace })
}

pub fn trace_csv(trace: &[f64]) -> String {
    let mut out = String::from("epoch,mean_loss\n");
    for (e, l) in trace.iter().enumerate() {
        out.push_str(&format!("{},{l}\n", e + 1));
    }
    out
}
