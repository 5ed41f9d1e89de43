//! Lloyd's k-means with seeded k-means++ initialization.

use serde::{Deserialize, Serialize};

use super::{squared_distance, Matrix, NumericsError};
use crate::real::Real;
use crate::rng::SplitMix64;

/// The `k x dim` centroids produced by [`kmeans`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CentroidSet<T> {
    pub centroids: Matrix<T>,
}

impl<T: Real> CentroidSet<T> {
    pub fn n(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    pub fn centroid(&self, i: usize) -> &[T] {
        self.centroids.row(i)
    }
}

/// Restarts drawn from the seed stream; the lowest-objective run wins.
/// Single k-means++ runs get stuck in local optima often enough to violate
/// the small-instance optimality contract, so a handful of deterministic
/// restarts is part of the algorithm.
const N_RESTARTS: usize = 10;

/// Runs Lloyd's algorithm from k-means++ seedings driven by `seed`.
///
/// Each restart stops when assignments are unchanged or `max_iters` is
/// reached; the restart with the lowest objective is returned. An empty
/// cluster is reseeded with the point farthest from its assigned centroid.
/// The result is a pure function of (samples, k, seed, max_iters).
pub fn kmeans<T: Real>(
    samples: &Matrix<T>,
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<CentroidSet<T>, NumericsError> {
    let m = samples.rows();
    if k == 0 || k > m {
        return Err(NumericsError::InvalidCount {
            context: "kmeans",
            detail: format!("k={k} must satisfy 1 <= k <= {m} samples"),
        });
    }

    let mut rng = SplitMix64::derive(seed, 0x6b6d_6561_6e73); // "kmeans"
    let mut best: Option<(f64, Matrix<T>)> = None;
    for _restart in 0..N_RESTARTS {
        let centroids = lloyd_once(samples, k, max_iters, &mut rng);
        let obj = kmeans_objective(samples, &centroids);
        if best.as_ref().is_none_or(|(b, _)| obj < *b) {
            best = Some((obj, centroids));
        }
    }
    Ok(CentroidSet {
        centroids: best.expect("at least one restart").1,
    })
}

fn lloyd_once<T: Real>(
    samples: &Matrix<T>,
    k: usize,
    max_iters: usize,
    rng: &mut SplitMix64,
) -> Matrix<T> {
    let m = samples.rows();
    let dim = samples.cols();
    let mut centroids = plus_plus_init(samples, k, rng);
    let mut assignment = vec![usize::MAX; m];

    for _iter in 0..max_iters {
        let mut changed = false;
        for (i, slot) in assignment.iter_mut().enumerate() {
            let best = nearest(&centroids, samples.row(i));
            if best != *slot {
                *slot = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }

        let mut sums: Matrix<T> = Matrix::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (i, &a) in assignment.iter().enumerate() {
            counts[a] += 1;
            let row = sums.row_mut(a);
            for (o, &v) in row.iter_mut().zip(samples.row(i).iter()) {
                *o += v;
            }
        }

        // Reseed empty clusters with the points farthest from their centroids,
        // never reusing the same point twice in one update.
        let mut taken = vec![false; m];
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let mut far_idx = usize::MAX;
            let mut far_d = -1.0f64;
            for i in 0..m {
                if taken[i] {
                    continue;
                }
                let d = squared_distance(samples.row(i), centroids.row(assignment[i])).to_f64();
                if d > far_d {
                    far_d = d;
                    far_idx = i;
                }
            }
            taken[far_idx] = true;
            centroids.row_mut(c).copy_from_slice(samples.row(far_idx));
        }
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let inv = T::ONE / T::from_f64(counts[c] as f64);
            let sum_row = sums.row(c).to_vec();
            for (o, v) in centroids.row_mut(c).iter_mut().zip(sum_row) {
                *o = v * inv;
            }
        }
    }

    centroids
}

/// Sum of squared distances from each sample to its nearest centroid.
pub fn kmeans_objective<T: Real>(samples: &Matrix<T>, centroids: &Matrix<T>) -> f64 {
    let mut total = 0.0;
    for i in 0..samples.rows() {
        let mut best = f64::INFINITY;
        for c in 0..centroids.rows() {
            best = best.min(squared_distance(samples.row(i), centroids.row(c)).to_f64());
        }
        total += best;
    }
    total
}

fn nearest<T: Real>(centroids: &Matrix<T>, x: &[T]) -> usize {
    let mut best = 0;
    let mut best_d = squared_distance(centroids.row(0), x);
    for c in 1..centroids.rows() {
        let d = squared_distance(centroids.row(c), x);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// k-means++: first centroid uniform, then D^2-weighted draws.
fn plus_plus_init<T: Real>(samples: &Matrix<T>, k: usize, rng: &mut SplitMix64) -> Matrix<T> {
    let m = samples.rows();
    let dim = samples.cols();
    let mut centroids = Matrix::zeros(k, dim);
    let mut chosen = vec![false; m];

    let first = rng.next_index(m);
    chosen[first] = true;
    centroids.row_mut(0).copy_from_slice(samples.row(first));

    let mut d2 = vec![0.0f64; m];
    for next in 1..k {
        let mut total = 0.0;
        for i in 0..m {
            let mut best = f64::INFINITY;
            for c in 0..next {
                best = best.min(squared_distance(samples.row(i), centroids.row(c)).to_f64());
            }
            d2[i] = best;
            total += best;
        }
        let pick = if total > 0.0 {
            let dart = rng.next_f64() * total;
            let mut acc = 0.0;
            let mut pick = m - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if dart < acc {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            // All remaining points coincide with a centroid; take the first
            // unchosen index so the draw stays deterministic.
            (0..m).find(|&i| !chosen[i]).unwrap_or(0)
        };
        chosen[pick] = true;
        centroids.row_mut(next).copy_from_slice(samples.row(pick));
    }
    centroids
}
