//! Runs the full train / retrieve / rerank loop on the synthetic corpus and
//! prints Recall@1 at each stage.
//!
//!     cargo run --release -p mmrank --example synthetic_lift -- [seed [sig code noise]]

use std::collections::HashMap;

use mmrank::contrastive::{train_projection, TrainConfig};
use mmrank::evaluator::recall_at_k;
use mmrank::rank_training::{mine_hard_negatives, scorer_features, train_reranker, RerankTrainConfig, ToyScorer, ToyScorerService};
use mmrank::reranker::{rerank_all, RerankConfig};
use mmrank::retriever::{batch_retrieve, PoolFilter};
use mmrank::store::EmbeddingMatrix;
use mmrank::synthetic::{generate, SyntheticConfig};

fn main() {
    let args: Vec<f64> = std::env::args().skip(1).map(|a| a.parse().expect("number")).collect();
    let seed = args.first().map_or(0, |&s| s as u64);
    let mut cfg = SyntheticConfig { seed, ..SyntheticConfig::default() };
    if let [_, sig, code, noise, ..] = args[..] {
        cfg.query_signal_noise = sig;
        cfg.query_code_noise = code;
        cfg.noise_scale = noise;
    }
    let corpus = generate(&cfg);
    let global = PoolFilter::global();

    let raw = batch_retrieve(&corpus.queries, &corpus.docs, 100, &global).unwrap();
    let raw_r1 = recall_at_k(&raw, &corpus.qrels, 1).unwrap();

    let base = EmbeddingMatrix::concat(&[&corpus.train_queries, &corpus.docs]).unwrap();
    let trained = train_projection(&corpus.train_pairs, &base, &TrainConfig { seed, ..TrainConfig::default() }).unwrap();
    let docs = trained.head.project_matrix(&corpus.docs).unwrap();
    let queries = trained.head.project_matrix(&corpus.queries).unwrap();
    let train_queries = trained.head.project_matrix(&corpus.train_queries).unwrap();
    let run = batch_retrieve(&queries, &docs, 100, &global).unwrap();
    let head_r1 = recall_at_k(&run, &corpus.qrels, 1).unwrap();
    println!(
        "loss {:.4} -> {:.4}",
        trained.trace[0],
        trained.trace.last().unwrap()
    );

    let negs = mine_hard_negatives(&train_queries, &docs, &corpus.train_qrels, 100, &global).unwrap();
    let emb = scorer_features(&[&corpus.queries, &corpus.train_queries, &corpus.docs]).unwrap();
    let outcome = train_reranker(
        &negs,
        &corpus.train_qrels,
        ToyScorer::zeros(emb.dim()),
        &emb,
        &RerankTrainConfig { seed, ..RerankTrainConfig::default() },
    )
    .unwrap();
    let first = outcome.trace[0];
    let last = *outcome.trace.last().unwrap();
    println!("rank loss {:.4} -> {:.4}", first.rank, last.rank);

    let records: HashMap<_, _> = corpus.records.iter().map(|r| (r.id.clone(), r.clone())).collect();
    let service = ToyScorerService { scorer: outcome.scorer, embeddings: emb };
    let reranked = rerank_all(&records, &run, &records, &service, &RerankConfig::default()).unwrap();
    let rr_r1 = recall_at_k(&reranked, &corpus.qrels, 1).unwrap();

    println!("recall@1 raw {raw_r1:.3} head {head_r1:.3} reranked {rr_r1:.3}");
}
