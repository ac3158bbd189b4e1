//! Independent reference implementations used by the integration tests.
//! Everything here is deliberately naive: scalar loops, full sorts, no
//! shared code with the library beyond the data types.

#![allow(dead_code)]

use std::cmp::Ordering;
use std::collections::HashMap;

use mmrank::evaluator::Qrels;
use mmrank::store::EmbeddingMatrix;
use mmrank::types::{DocId, Record};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn naive_cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut ab = 0.0f64;
    let mut aa = 0.0f64;
    let mut bb = 0.0f64;
    for i in 0..a.len() {
        let (x, y) = (a[i] as f64, b[i] as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// Scores every row, sorts everything by (score desc, id asc), truncates.
pub fn naive_top_k(q: &[f32], store: &EmbeddingMatrix, k: usize) -> Vec<(DocId, f64)> {
    let mut all: Vec<(DocId, f64)> = (0..store.len())
        .map(|i| (store.ids()[i].clone(), naive_cosine(q, store.row(i))))
        .collect();
    all.sort_by(|a, b| match b.1.partial_cmp(&a.1).unwrap() {
        Ordering::Equal => a.0.as_str().as_bytes().cmp(b.0.as_str().as_bytes()),
        o => o,
    });
    all.truncate(k);
    all
}

pub fn gaussian_store(n: usize, dim: usize, seed: u64) -> EmbeddingMatrix {
    let mut r = rng(seed);
    let data = (0..n * dim)
        .map(|_| r.sample::<f32, _>(rand_distr::StandardNormal))
        .collect();
    let ids = (0..n).map(|i| DocId::new(format!("doc{i:06}"))).collect();
    EmbeddingMatrix::new(dim, ids, data).unwrap()
}

pub fn gaussian_vec(r: &mut impl Rng, dim: usize) -> Vec<f32> {
    (0..dim).map(|_| r.sample::<f32, _>(rand_distr::StandardNormal)).collect()
}

/// Row-major `rows x cols` matrix of standard normals in f64.
pub fn gaussian_f64(r: &mut impl Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| r.sample::<f64, _>(rand_distr::StandardNormal)).collect())
        .collect()
}

/// Direct transcription of the batch contrastive loss: mean over rows of
/// `-log(exp(cos(q_n, c_n)/t) / sum_m exp(cos(q_n, c_m)/t))`.
pub fn naive_info_nce(q: &[Vec<f64>], c: &[Vec<f64>], t: f64) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let mut ab = 0.0;
        let mut aa = 0.0;
        let mut bb = 0.0;
        for i in 0..a.len() {
            ab += a[i] * b[i];
            aa += a[i] * a[i];
            bb += b[i] * b[i];
        }
        ab / (aa.sqrt() * bb.sqrt())
    };
    let b = q.len();
    let mut total = 0.0;
    for n in 0..b {
        let num = (cos(&q[n], &c[n]) / t).exp();
        let mut den = 0.0;
        for m in 0..b {
            den += (cos(&q[n], &c[m]) / t).exp();
        }
        total += -(num / den).ln();
    }
    total / b as f64
}

/// Central differences of `f` at `x`.
pub fn finite_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max_i |a_i - b_i| / max(max_i |a_i|, max_i |b_i|)`.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// One relevant document per query, drawn uniformly.
pub fn random_qrels(queries: &EmbeddingMatrix, docs: &EmbeddingMatrix, r: &mut impl Rng) -> Qrels {
    queries
        .ids()
        .iter()
        .map(|q| (q.clone(), docs.ids()[r.gen_range(0..docs.len())].clone()))
        .collect()
}

/// Placeholder text records for every id in the given stores.
pub fn text_records(stores: &[&EmbeddingMatrix]) -> HashMap<DocId, Record> {
    stores
        .iter()
        .flat_map(|s| s.ids().iter())
        .map(|id| (id.clone(), Record::text(id.clone(), format!("content of {id}"))))
        .collect()
}

pub fn query_store(n: usize, dim: usize, seed: u64) -> EmbeddingMatrix {
    let mut r = rng(seed);
    let rows = (0..n).map(|i| (DocId::new(format!("query{i:04}")), gaussian_vec(&mut r, dim)));
    EmbeddingMatrix::from_rows(dim, rows).unwrap()
}
