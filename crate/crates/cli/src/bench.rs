//! Dense vs candidate-restricted attention timing.

use std::collections::HashSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use iet_core::attention::{dense_attention_core, sparse_attention_core};
use iet_core::numerics::{flops, Tensor};
use iet_core::{CandidateSet, Result};

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub tokens: usize,
    pub k: usize,
    pub sparse_s: f64,
    pub sparse_flops: u64,
    /// Absent when the dense path was skipped.
    pub dense_s: Option<f64>,
    pub dense_flops: Option<u64>,
}

#[derive(Debug, Clone, Copy)]
pub struct BenchSpec {
    pub heads: usize,
    pub head_dim: usize,
    pub reps: usize,
    pub seed: u64,
    pub dense: bool,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self { heads: 1, head_dim: 16, reps: 3, seed: 0, dense: true }
    }
}

/// `k` distinct random candidates per row (clamped to `n`).
pub fn random_candidates(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<CandidateSet> {
    let k = k.min(n);
    let rows: Vec<Vec<u32>> = (0..n)
        .map(|_| {
            let mut seen = HashSet::with_capacity(k);
            let mut row = Vec::with_capacity(k);
            while row.len() < k {
                let t = rng.random_range(0..n as u32);
                if seen.insert(t) {
                    row.push(t);
                }
            }
            row
        })
        .collect();
    CandidateSet::from_rows(n, &rows, None)
}

fn best_of<T>(reps: usize, mut f: impl FnMut() -> Result<T>) -> Result<(f64, u64)> {
    let mut best = f64::INFINITY;
    let mut count = 0;
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        let (r, c) = flops::measure(&mut f);
        r?;
        best = best.min(start.elapsed().as_secs_f64());
        count = c;
    }
    Ok((best, count))
}

pub fn bench_point(n: usize, k: usize, spec: BenchSpec) -> Result<BenchRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (n as u64) << 20 ^ k as u64);
    let shape = [spec.heads, n, spec.head_dim];
    let q = Tensor::uniform(&shape, -1.0, 1.0, &mut rng);
    let kk = Tensor::uniform(&shape, -1.0, 1.0, &mut rng);
    let v = Tensor::uniform(&shape, -1.0, 1.0, &mut rng);
    let cands = random_candidates(n, k, &mut rng)?;
    let (sparse_s, sparse_flops) = best_of(spec.reps, || sparse_attention_core(&q, &kk, &v, &cands))?;
    let (dense_s, dense_flops) = if spec.dense {
        let (t, f) = best_of(spec.reps, || dense_attention_core(&q, &kk, &v, |_, _, _| 0.0))?;
        (Some(t), Some(f))
    } else {
        (None, None)
    };
    Ok(BenchRow { tokens: n, k, sparse_s, sparse_flops, dense_s, dense_flops })
}

pub fn run(sizes: &[usize], ks: &[usize], spec: BenchSpec) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &n in sizes {
        for &k in ks {
            rows.push(bench_point(n, k, spec)?);
        }
    }
    Ok(rows)
}

pub fn table(rows: &[BenchRow]) -> String {
    let mut s = format!("{:>7} {:>5} {:>12} {:>14} {:>12} {:>16}\n", "N", "k", "sparse_s", "sparse_flops", "dense_s", "dense_flops");
    for r in rows {
        let dense_s = r.dense_s.map_or("-".to_string(), |t| format!("{t:.6}"));
        let dense_f = r.dense_flops.map_or("-".to_string(), |f| f.to_string());
        s += &format!(
            "{:>7} {:>5} {:>12.6} {:>14} {:>12} {:>16}\n",
            r.tokens, r.k, r.sparse_s, r.sparse_flops, dense_s, dense_f
        );
    }
    s
}
