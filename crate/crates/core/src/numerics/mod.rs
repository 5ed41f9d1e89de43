//! Deterministic dense linear algebra, PCA, and k-means.
//!
//! All operations here are pure functions over immutable inputs with a fixed
//! summation order; for a given precision, seed, and platform the results are
//! bit-reproducible.

mod kmeans;
mod matrix;
mod pca;

pub use kmeans::{kmeans, kmeans_objective, CentroidSet};
pub use matrix::Matrix;
pub use pca::{fit_pca, PcaProjection};

use thiserror::Error;

use crate::real::Real;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("zero-norm vector in {context}")]
    ZeroVector { context: &'static str },
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid count in {context}: {detail}")]
    InvalidCount {
        context: &'static str,
        detail: String,
    },
    #[error("non-finite value produced in {context}")]
    NonFinite { context: &'static str },
}

/// Inner product with eight fixed-order lanes so the loop vectorizes.
/// The summation order is part of the function's contract: it never varies
/// with anything but the input length, keeping results bit-reproducible.
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [T::ZERO; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let off = c * 8;
        for l in 0..8 {
            lanes[l] += a[off + l] * b[off + l];
        }
    }
    let mut tail = T::ZERO;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    let p0 = (lanes[0] + lanes[4]) + (lanes[2] + lanes[6]);
    let p1 = (lanes[1] + lanes[5]) + (lanes[3] + lanes[7]);
    (p0 + p1) + tail
}

pub fn norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

pub fn squared_distance<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::ZERO;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = *x - *y;
        acc += d * d;
    }
    acc
}

/// Cosine similarity of two equal-length vectors, clamped to [-1, 1].
///
/// A zero-norm input is an error rather than a NaN.
pub fn cosine_similarity<T: Real>(a: &[T], b: &[T]) -> Result<T, NumericsError> {
    if a.len() != b.len() {
        return Err(NumericsError::DimensionMismatch {
            context: "cosine_similarity",
            expected: a.len(),
            got: b.len(),
        });
    }
    let na = norm(a);
    let nb = norm(b);
    if na == T::ZERO || nb == T::ZERO {
        return Err(NumericsError::ZeroVector {
            context: "cosine_similarity",
        });
    }
    let c = dot(a, b) / (na * nb);
    Ok(c.max(-T::ONE).min(T::ONE))
}
