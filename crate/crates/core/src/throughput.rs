//! Scan throughput measurement.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::retriever::{retrieve_top_k, retrieve_top_k_chunked, PoolFilter, RetrieveError};
use crate::store::EmbeddingMatrix;
use crate::types::{DocId, RankedList};

/// Uniform random store; values in `[-1, 1)`.
pub fn random_store(n: usize, dim: usize, seed: u64) -> EmbeddingMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let ids = (0..n).map(|i| DocId::new(format!("d{i}"))).collect();
    EmbeddingMatrix::new(dim, ids, data).expect("random store is valid")
}

fn random_queries(count: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    (0..count)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct ScanReport {
    pub docs: usize,
    pub dim: usize,
    pub queries: usize,
    pub k: usize,
    pub threads: usize,
    pub single_secs: f64,
    pub parallel_secs: f64,
    pub dots_per_sec_single: f64,
    pub speedup: f64,
    pub bit_identical: bool,
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

/// Times `queries` single-threaded scans against the chunked parallel scan on
/// a dedicated pool of `threads` workers, and checks the outputs match bit
/// for bit.
pub fn measure_scan(
    docs: usize,
    dim: usize,
    queries: usize,
    k: usize,
    threads: usize,
    seed: u64,
) -> Result<ScanReport, RetrieveError> {
    let store = random_store(docs, dim, seed);
    let qs = random_queries(queries, dim, seed);
    let filter = PoolFilter::global();
    // Warm the norm cache so neither side pays for it.
    store.norms();

    let run = |parallel: bool| -> Result<Vec<RankedList>, RetrieveError> {
        qs.iter()
            .enumerate()
            .map(|(i, q)| {
                let id = DocId::new(format!("q{i}"));
                if parallel {
                    retrieve_top_k_chunked(id, q, &store, k, &filter)
                } else {
                    retrieve_top_k(id, q, &store, k, &filter)
                }
            })
            .collect()
    };

    let (single, t_single) = timed(|| run(false));
    let single = single?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool");
    let (parallel, t_parallel) = timed(|| pool.install(|| run(true)));
    let parallel = parallel?;

    let bit_identical = single.len() == parallel.len()
        && single.iter().zip(&parallel).all(|(a, b)| {
            a.entries.len() == b.entries.len()
                && a.entries
                    .iter()
                    .zip(&b.entries)
                    .all(|(x, y)| x.id == y.id && x.rank == y.rank && x.score.to_bits() == y.score.to_bits())
        });

    let single_secs = t_single.as_secs_f64();
    let parallel_secs = t_parallel.as_secs_f64();
    Ok(ScanReport {
        docs,
        dim,
        queries,
        k,
        threads,
        single_secs,
        parallel_secs,
        dots_per_sec_single: (docs * queries) as f64 / single_secs,
        speedup: single_secs / parallel_secs,
        bit_identical,
    })
}
