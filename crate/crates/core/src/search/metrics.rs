use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numeric::Matrix;

use super::ivf::{Hit, IvfIndex};

pub const MRR_CUTOFF: usize = 10;
/// Minimum number of timed queries behind the latency figure.
pub const TIMED_QUERIES: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SearchMetrics {
    pub queries: usize,
    pub nprobe: usize,
    pub mrr_at_10: f64,
    /// Mean wall-clock milliseconds per query after a warm-up pass.
    pub avg_retrieval_ms: f64,
    pub memory_bytes: usize,
    /// Queries whose gold id is not in the index; each scored 0.
    pub missing_gold: Vec<usize>,
}

/// `1/rank` of `gold` within the first `MRR_CUTOFF` hits, else 0.
pub fn reciprocal_rank(hits: &[Hit], gold: u32) -> f64 {
    hits.iter().take(MRR_CUTOFF).position(|h| h.id == gold).map_or(0.0, |r| 1.0 / (r + 1) as f64)
}

/// Scores one query per row of `queries` against its gold id.
pub fn evaluate_search(index: &IvfIndex, queries: &Matrix, gold: &[u32], nprobe: usize) -> Result<SearchMetrics> {
    if queries.rows() == 0 {
        return Err(Error::EmptyInput("queries"));
    }
    if gold.len() != queries.rows() {
        return Err(Error::Shape(format!("{} gold ids for {} queries", gold.len(), queries.rows())));
    }
    let run = |i: usize| index.query(queries.row(i), MRR_CUTOFF, nprobe);
    let mut total = 0.0;
    let mut missing_gold = Vec::new();
    for (i, &g) in gold.iter().enumerate() {
        if !index.contains(g) {
            missing_gold.push(i);
        }
        total += reciprocal_rank(&run(i)?, g);
    }
    let n = queries.rows();
    let rounds = TIMED_QUERIES.div_ceil(n);
    let start = Instant::now();
    for _ in 0..rounds {
        for i in 0..n {
            std::hint::black_box(run(i)?);
        }
    }
    let avg_retrieval_ms = start.elapsed().as_secs_f64() * 1e3 / (rounds * n) as f64;
    Ok(SearchMetrics {
        queries: n,
        nprobe,
        mrr_at_10: total / n as f64,
        avg_retrieval_ms,
        memory_bytes: index.memory_bytes(),
        missing_gold,
    })
}
