//! Seeded synthetic corpus with planted relevance.
//!
//! Every vector has three blocks:
//!
//! * `signal`: shared between a query and its positive, perturbed on the
//!   query side;
//! * `code`: the query carries a fixed skew rotation of its positive's code,
//!   so it is invisible to any shared projection followed by cosine but
//!   learnable by a bilinear scorer;
//! * `noise`: independent per vector and large enough that raw cosine is a
//!   weak retriever.
//!
//! Training queries are disjoint from evaluation queries; both point at
//! documents in the same corpus.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::contrastive::{Stage, TrainPair};
use crate::evaluator::Qrels;
use crate::store::{write_store, EmbeddingMatrix, StoreError};
use crate::trec::{format_qrels, to_jsonl};
use crate::types::{DocId, Modality, Record, Segment};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub docs: usize,
    pub queries: usize,
    pub train_queries: usize,
    pub signal_dim: usize,
    /// Must be even.
    pub code_dim: usize,
    pub noise_dim: usize,
    pub query_signal_noise: f64,
    pub query_code_noise: f64,
    pub noise_scale: f64,
    pub datasets: Vec<String>,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            docs: 500,
            queries: 100,
            train_queries: 400,
            signal_dim: 8,
            code_dim: 4,
            noise_dim: 20,
            query_signal_noise: 0.5,
            query_code_noise: 0.3,
            noise_scale: 1.0,
            datasets: vec!["alpha".into(), "beta".into()],
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn dim(&self) -> usize {
        self.signal_dim + self.code_dim + self.noise_dim
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub config: SyntheticConfig,
    pub docs: EmbeddingMatrix,
    pub queries: EmbeddingMatrix,
    pub train_queries: EmbeddingMatrix,
    pub qrels: Qrels,
    pub train_qrels: Qrels,
    pub train_pairs: Vec<TrainPair>,
    pub records: Vec<Record>,
    /// Dataset tag per document.
    pub assignment: BTreeMap<DocId, String>,
    /// Dataset tag per evaluation query (that of its positive).
    pub query_datasets: BTreeMap<DocId, String>,
}

pub fn doc_id(i: usize) -> DocId {
    DocId::new(format!("d{i:05}"))
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn doc_record(i: usize) -> Record {
    let id = doc_id(i);
    match i % 3 {
        0 => Record::image(id.clone(), format!("assets/{id}.jpg")),
        1 => Record::text(id, format!("synthetic passage number {i}")),
        _ => Record {
            id: id.clone(),
            modality: Modality::Interleaved,
            segments: vec![
                Segment::Image(format!("assets/{id}.jpg")),
                Segment::Text(format!("caption for item {i}")),
            ],
            instruction: None,
        },
    }
}

pub const QUERY_INSTRUCTION: &str = "Retrieve the matching candidate.";

/// Generates the corpus. Fully determined by the config, including the seed.
pub fn generate(config: &SyntheticConfig) -> SyntheticCorpus {
    assert!(config.code_dim % 2 == 0, "code_dim must be even");
    assert!(!config.datasets.is_empty() && config.docs > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dim = config.dim();
    let (sd, cd) = (config.signal_dim, config.code_dim);

    let mut doc_rows: Vec<Vec<f64>> = Vec::with_capacity(config.docs);
    for _ in 0..config.docs {
        let mut v = gaussian(&mut rng, sd + cd, 1.0);
        v.extend(gaussian(&mut rng, config.noise_dim, config.noise_scale));
        doc_rows.push(v);
    }
    let assignment: BTreeMap<DocId, String> = (0..config.docs)
        .map(|i| (doc_id(i), config.datasets[i % config.datasets.len()].clone()))
        .collect();

    // Rotate each code pair by 90 degrees: (a, b) -> (-b, a).
    let make_query = |rng: &mut ChaCha8Rng, positive: usize| -> Vec<f32> {
        let d = &doc_rows[positive];
        let mut v = Vec::with_capacity(dim);
        for j in 0..sd {
            v.push(d[j] + config.query_signal_noise * rng.sample::<f64, _>(StandardNormal));
        }
        for j in (0..cd).step_by(2) {
            let (a, b) = (d[sd + j], d[sd + j + 1]);
            v.push(-b + config.query_code_noise * rng.sample::<f64, _>(StandardNormal));
            v.push(a + config.query_code_noise * rng.sample::<f64, _>(StandardNormal));
        }
        v.extend(gaussian(rng, config.noise_dim, config.noise_scale));
        v.into_iter().map(|x| x as f32).collect()
    };

    let mut build = |prefix: &str, n: usize| {
        let mut rows = Vec::with_capacity(n);
        let mut qrels = Qrels::new();
        let mut positives = Vec::with_capacity(n);
        for i in 0..n {
            let id = DocId::new(format!("{prefix}{i:04}"));
            let positive = rng.gen_range(0..config.docs);
            rows.push((id.clone(), make_query(&mut rng, positive)));
            qrels.insert(id.clone(), doc_id(positive));
            positives.push((id, positive));
        }
        (
            EmbeddingMatrix::from_rows(dim, rows).expect("finite synthetic rows"),
            qrels,
            positives,
        )
    };
    let (queries, qrels, eval_pos) = build("q", config.queries);
    let (train_queries, train_qrels, train_pos) = build("t", config.train_queries);

    let docs = EmbeddingMatrix::from_rows(
        dim,
        doc_rows
            .iter()
            .enumerate()
            .map(|(i, r)| (doc_id(i), r.iter().map(|&x| x as f32).collect())),
    )
    .expect("finite synthetic rows");

    let train_pairs = train_pos
        .iter()
        .map(|(q, p)| TrainPair {
            query_id: q.clone(),
            positive_id: doc_id(*p),
            stage: Stage::Instruction,
        })
        .collect();

    let mut records: Vec<Record> = (0..config.docs).map(doc_record).collect();
    for (q, p) in eval_pos.iter().chain(&train_pos) {
        records.push(
            Record::text(q.clone(), format!("a query looking for item {p}"))
                .with_instruction(QUERY_INSTRUCTION),
        );
    }
    let query_datasets = eval_pos
        .iter()
        .map(|(q, p)| (q.clone(), assignment[&doc_id(*p)].clone()))
        .collect();

    SyntheticCorpus {
        config: config.clone(),
        docs,
        queries,
        train_queries,
        qrels,
        train_qrels,
        train_pairs,
        records,
        assignment,
        query_datasets,
    }
}

#[derive(Debug, thiserror::Error)]
pub enum WriteError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// File names used by [`SyntheticCorpus::write_to`].
pub mod files {
    pub const DOCS: &str = "docs.bin";
    pub const QUERIES: &str = "queries.bin";
    pub const TRAIN_QUERIES: &str = "train_queries.bin";
    pub const DOC_RECORDS: &str = "docs.jsonl";
    pub const QUERY_RECORDS: &str = "queries.jsonl";
    pub const TRAIN_QUERY_RECORDS: &str = "train_queries.jsonl";
    pub const QRELS: &str = "qrels.txt";
    pub const TRAIN_QRELS: &str = "train_qrels.txt";
    pub const TRAIN_PAIRS: &str = "train_pairs.jsonl";
    pub const DATASETS: &str = "datasets.tsv";
    pub const CONFIG: &str = "corpus.json";
}

impl SyntheticCorpus {
    pub fn write_to(&self, dir: &Path) -> Result<(), WriteError> {
        fs::create_dir_all(dir)?;
        write_store(&self.docs, &dir.join(files::DOCS))?;
        write_store(&self.queries, &dir.join(files::QUERIES))?;
        write_store(&self.train_queries, &dir.join(files::TRAIN_QUERIES))?;
        for (store, name) in [
            (&self.docs, files::DOC_RECORDS),
            (&self.queries, files::QUERY_RECORDS),
            (&self.train_queries, files::TRAIN_QUERY_RECORDS),
        ] {
            let part: Vec<&Record> = self.records.iter().filter(|r| store.contains(&r.id)).collect();
            fs::write(dir.join(name), to_jsonl(&part))?;
        }
        fs::write(dir.join(files::QRELS), format_qrels(&self.qrels))?;
        fs::write(dir.join(files::TRAIN_QRELS), format_qrels(&self.train_qrels))?;
        fs::write(dir.join(files::TRAIN_PAIRS), to_jsonl(&self.train_pairs))?;
        let mut tsv = String::new();
        for (id, tag) in &self.assignment {
            tsv.push_str(&format!("{id}\t{tag}\n"));
        }
        fs::write(dir.join(files::DATASETS), tsv)?;
        fs::write(
            dir.join(files::CONFIG),
            serde_json::to_string_pretty(&self.config).expect("serializable"),
        )?;
        Ok(())
    }
}
