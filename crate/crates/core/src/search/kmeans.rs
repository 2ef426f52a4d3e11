//! k-means++ seeding followed by Lloyd iterations.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numeric::Rng;

use super::{sq_dist, EmbeddingMatrix};

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub k: usize,
    pub dim: usize,
    /// `k × dim`, row-major.
    pub centroids: Vec<f64>,
    pub assignment: Vec<usize>,
    /// Inertia after each assignment step.
    pub inertia: Vec<f64>,
    /// Whether the assignment reached a fixpoint before `max_iters`.
    pub converged: bool,
}

impl KMeans {
    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }
}

/// Index of the nearest centroid; ties go to the lower index.
pub(crate) fn nearest(x: &[f32], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(x, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign(x: &EmbeddingMatrix, centroids: &[f64]) -> Vec<(usize, f64)> {
    (0..x.len()).into_par_iter().map(|i| nearest(x.row(i), centroids, x.dim())).collect()
}

fn seed_plus_plus(x: &EmbeddingMatrix, k: usize, rng: &mut Rng) -> Vec<f64> {
    let (m, dim) = (x.len(), x.dim());
    let row = |i: usize| x.row(i).iter().map(|&v| v as f64).collect::<Vec<f64>>();
    let mut chosen = vec![false; m];
    let first = rng.below(m);
    chosen[first] = true;
    let mut centroids = row(first);
    let mut d2: Vec<f64> = (0..m).map(|i| sq_dist(x.row(i), &centroids)).collect();
    for _ in 1..k {
        // All remaining points coincide with a centroid: take the first unused one.
        let next = rng.weighted_index(&d2).unwrap_or_else(|| chosen.iter().position(|&c| !c).expect("k <= m"));
        chosen[next] = true;
        let c = row(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), &c));
        }
        centroids.extend(c);
    }
    debug_assert_eq!(centroids.len(), k * dim);
    centroids
}

/// Clusters the rows of `x` into `k` groups.
///
/// An emptied cluster is re-seeded at the point farthest from its centroid.
pub fn kmeans_fit(x: &EmbeddingMatrix, k: usize, rng: &mut Rng, max_iters: usize) -> Result<KMeans> {
    let (m, dim) = (x.len(), x.dim());
    if k == 0 || k > m {
        return Err(Error::invalid("k", format!("{k} clusters for {m} points")));
    }
    if max_iters == 0 {
        return Err(Error::invalid("max_iters", "must be at least 1"));
    }
    let mut centroids = seed_plus_plus(x, k, rng);
    let mut current = assign(x, &centroids);
    let mut inertia = vec![current.iter().map(|a| a.1).sum()];
    let mut converged = false;
    for _ in 0..max_iters {
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &(c, _)) in current.iter().enumerate() {
            counts[c] += 1;
            sums[c * dim..(c + 1) * dim].iter_mut().zip(x.row(i)).for_each(|(s, &v)| *s += v as f64);
        }
        for c in 0..k {
            if counts[c] > 0 {
                let n = counts[c] as f64;
                for (dst, s) in centroids[c * dim..(c + 1) * dim].iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *dst = s / n;
                }
            }
        }
        let mut taken = vec![false; m];
        for c in (0..k).filter(|&c| counts[c] == 0) {
            let far = (0..m)
                .filter(|&i| !taken[i])
                .map(|i| (i, sq_dist(x.row(i), &centroids[current[i].0 * dim..(current[i].0 + 1) * dim])))
                .fold((0, -1.0), |best, cand| if cand.1 > best.1 { cand } else { best });
            taken[far.0] = true;
            for (dst, &v) in centroids[c * dim..(c + 1) * dim].iter_mut().zip(x.row(far.0)) {
                *dst = v as f64;
            }
        }
        let next = assign(x, &centroids);
        inertia.push(next.iter().map(|a| a.1).sum());
        let same = next.iter().zip(&current).all(|(a, b)| a.0 == b.0);
        current = next;
        if same {
            converged = true;
            break;
        }
    }
    Ok(KMeans { k, dim, centroids, assignment: current.into_iter().map(|a| a.0).collect(), inertia, converged })
}
