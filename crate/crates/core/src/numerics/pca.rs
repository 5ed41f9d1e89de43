//! PCA by Jacobi eigendecomposition of the sample covariance.

use serde::{Deserialize, Serialize};

use super::{Matrix, NumericsError};
use crate::real::Real;

/// Fitted projection onto the top principal components.
///
/// `components` holds one orthonormal direction per row (`out_dim x input_dim`),
/// ordered by descending eigenvalue. The sign of each row is fixed so that its
/// first entry of non-negligible magnitude is positive, which keeps serialized
/// projections stable across runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcaProjection<T> {
    pub mean: Vec<T>,
    pub components: Matrix<T>,
    pub input_dim: usize,
    pub out_dim: usize,
    /// Eigenvalues of the kept components, descending.
    pub eigenvalues: Vec<T>,
    /// Set when the covariance rank was below `out_dim`; the trailing
    /// components are then an arbitrary orthonormal completion.
    pub rank_deficient: bool,
}

impl<T: Real> PcaProjection<T> {
    /// Identity projection: no centering, no rotation. Used when dimension
    /// reduction is disabled.
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![T::ZERO; dim],
            components: Matrix::identity(dim),
            input_dim: dim,
            out_dim: dim,
            eigenvalues: vec![T::ONE; dim],
            rank_deficient: false,
        }
    }

    /// Projects `x` to `components * (x - mean)`.
    pub fn project(&self, x: &[T]) -> Result<Vec<T>, NumericsError> {
        if x.len() != self.input_dim {
            return Err(NumericsError::DimensionMismatch {
                context: "pca_project",
                expected: self.input_dim,
                got: x.len(),
            });
        }
        let centered: Vec<T> = x.iter().zip(self.mean.iter()).map(|(a, m)| *a - *m).collect();
        let mut out = Vec::with_capacity(self.out_dim);
        for r in 0..self.out_dim {
            out.push(super::dot(self.components.row(r), &centered));
        }
        Ok(out)
    }

    /// Projects every row of `xs`.
    pub fn project_rows(&self, xs: &Matrix<T>) -> Result<Matrix<T>, NumericsError> {
        let mut out = Matrix::zeros(xs.rows(), self.out_dim);
        for r in 0..xs.rows() {
            let p = self.project(xs.row(r))?;
            out.row_mut(r).copy_from_slice(&p);
        }
        Ok(out)
    }

    /// Reconstructs from the projected coordinates (mean + C^T y).
    pub fn reconstruct(&self, y: &[T]) -> Vec<T> {
        let mut out = self.mean.clone();
        for (r, &coef) in y.iter().enumerate() {
            for (o, &c) in out.iter_mut().zip(self.components.row(r).iter()) {
                *o += coef * c;
            }
        }
        out
    }
}

/// Fits a PCA projection to the rows of `samples`.
///
/// Components are the top-`out_dim` eigenvectors of the centered sample
/// covariance (denominator M-1), computed with a cyclic Jacobi sweep.
pub fn fit_pca<T: Real>(samples: &Matrix<T>, out_dim: usize) -> Result<PcaProjection<T>, NumericsError> {
    let m = samples.rows();
    let d = samples.cols();
    if out_dim == 0 || out_dim > d {
        return Err(NumericsError::DimensionMismatch {
            context: "fit_pca out_dim",
            expected: d,
            got: out_dim,
        });
    }
    if m < 2 || m < out_dim {
        return Err(NumericsError::InvalidCount {
            context: "fit_pca",
            detail: format!("need at least max(2, out_dim) samples, got {m}"),
        });
    }

    let inv_m = T::ONE / T::from_f64(m as f64);
    let mut mean = vec![T::ZERO; d];
    for r in 0..m {
        for (acc, &v) in mean.iter_mut().zip(samples.row(r).iter()) {
            *acc += v;
        }
    }
    for v in mean.iter_mut() {
        *v *= inv_m;
    }

    // Covariance, exploiting symmetry.
    let denom = T::ONE / T::from_f64((m - 1) as f64);
    let mut cov: Matrix<T> = Matrix::zeros(d, d);
    let mut centered = vec![T::ZERO; d];
    for r in 0..m {
        for (c, (&v, &mu)) in samples.row(r).iter().zip(mean.iter()).enumerate() {
            centered[c] = v - mu;
        }
        for i in 0..d {
            let ci = centered[i];
            let row = cov.row_mut(i);
            for j in i..d {
                row[j] += ci * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov.get(i, j) * denom;
            cov.set(i, j, v);
            cov.set(j, i, v);
        }
    }

    let (eigenvalues, eigenvectors) = jacobi_eigen(&cov);

    // Order by descending eigenvalue; stable on ties.
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eigenvalues[b]
            .partial_cmp(&eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let scale = eigenvalues
        .iter()
        .map(|v| v.to_f64().abs())
        .fold(0.0, f64::max)
        .max(1.0);
    let rank_tol = scale * T::EPSILON.to_f64() * d as f64 * 16.0;

    let mut components = Matrix::zeros(out_dim, d);
    let mut kept = Vec::with_capacity(out_dim);
    let mut rank_deficient = false;
    for (row, &idx) in order.iter().take(out_dim).enumerate() {
        if eigenvalues[idx].to_f64() <= rank_tol {
            rank_deficient = true;
        }
        kept.push(eigenvalues[idx].max(T::ZERO));
        // Eigenvector idx is column idx of the accumulated rotation.
        for c in 0..d {
            components.set(row, c, eigenvectors.get(c, idx));
        }
        fix_sign(components.row_mut(row));
    }

    if !components.all_finite() {
        return Err(NumericsError::NonFinite { context: "fit_pca" });
    }

    Ok(PcaProjection {
        mean,
        components,
        input_dim: d,
        out_dim,
        eigenvalues: kept,
        rank_deficient,
    })
}

/// Flips the row so its first entry with non-negligible magnitude is positive.
fn fix_sign<T: Real>(row: &mut [T]) {
    let tiny = T::from_f64(1e-12);
    for &v in row.iter() {
        if v.abs() > tiny {
            if v < T::ZERO {
                for x in row.iter_mut() {
                    *x = -*x;
                }
            }
            return;
        }
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Returns (eigenvalues, V) with A = V diag(w) V^T; eigenvector k is column k
/// of V. The sweep order is fixed, so the result is deterministic.
fn jacobi_eigen<T: Real>(a: &Matrix<T>) -> (Vec<T>, Matrix<T>) {
    let n = a.rows();
    let mut m = a.clone();
    let mut v = Matrix::identity(n);

    let scale = m
        .data()
        .iter()
        .map(|x| x.to_f64().abs())
        .fold(0.0, f64::max)
        .max(1.0);
    let tol = T::EPSILON.to_f64() * scale;

    for _sweep in 0..64 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m.get(p, q).to_f64().abs();
            }
        }
        if off <= tol * (n * n) as f64 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq.to_f64().abs() <= tol * 1e-3 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (T::from_f64(2.0) * apq);
                // tan of the rotation angle, the numerically stable choice.
                let t = {
                    let sign = if theta >= T::ZERO { T::ONE } else { -T::ONE };
                    sign / (theta.abs() + (theta * theta + T::ONE).sqrt())
                };
                let c = T::ONE / (t * t + T::ONE).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }

    let eig = (0..n).map(|i| m.get(i, i)).collect();
    (eig, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::dot;
    use approx::assert_relative_eq;

    #[test]
    fn line_fit_recovers_direction() {
        // points on y = 2x; by hand, the 2x2 covariance eigenvector is (1,2)/sqrt(5)
        let samples = Matrix::from_rows(&[
            vec![1.0f64, 2.0],
            vec![2.0, 4.0],
            vec![-1.0, -2.0],
            vec![0.0, 0.0],
        ]);
        let p = fit_pca(&samples, 1).unwrap();
        let c = p.components.row(0);
        assert_relative_eq!(c[0], 0.4472135954999579, epsilon = 1e-9);
        assert_relative_eq!(c[1], 0.8944271909999159, epsilon = 1e-9);
    }

    #[test]
    fn projecting_point_on_line() {
        let samples = Matrix::from_rows(&[
            vec![1.0f64, 2.0],
            vec![2.0, 4.0],
            vec![-1.0, -2.0],
            vec![0.0, 0.0],
        ]);
        let p = fit_pca(&samples, 1).unwrap();
        // mean = (0.5, 1.0); (3,6) - mean = (2.5, 5.0); dot with (1,2)/sqrt(5) = 12.5/sqrt(5)
        let y = p.project(&[3.0, 6.0]).unwrap();
        assert_relative_eq!(y[0], 12.5 / 5.0f64.sqrt(), epsilon = 1e-9);
    }

    #[test]
    fn mean_projects_to_zero() {
        let samples = Matrix::from_rows(&[
            vec![1.0f64, 3.0, -2.0],
            vec![0.5, -1.0, 4.0],
            vec![2.0, 2.0, 2.0],
        ]);
        let p = fit_pca(&samples, 2).unwrap();
        let y = p.project(&p.mean.clone()).unwrap();
        for v in y {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn identity_projection_is_identity() {
        let p = PcaProjection::<f64>::identity(4);
        let x = [0.5, -1.0, 2.0, 7.0];
        assert_eq!(p.project(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn repeated_point_flags_rank_deficiency() {
        let samples = Matrix::from_rows(&[vec![1.0f64, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]]);
        let p = fit_pca(&samples, 1).unwrap();
        assert!(p.rank_deficient);
    }

    #[test]
    fn out_dim_too_large_is_error() {
        let samples = Matrix::from_rows(&[vec![1.0f64, 2.0], vec![3.0, 4.0], vec![5.0, 0.0]]);
        assert!(fit_pca(&samples, 3).is_err());
    }

    #[test]
    fn components_orthonormal() {
        let mut rng = crate::rng::SplitMix64::new(11);
        let data: Vec<f64> = (0..40 * 7).map(|_| rng.next_gaussian()).collect();
        let samples = Matrix::from_vec(40, 7, data);
        let p = fit_pca(&samples, 5).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let g = dot(p.components.row(i), p.components.row(j));
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g - want).abs() < 1e-5, "gram[{i}][{j}] = {g}");
            }
        }
    }

    #[test]
    fn reconstruction_error_never_increases_with_out_dim() {
        let mut rng = crate::rng::SplitMix64::new(29);
        let data: Vec<f64> = (0..30 * 6).map(|_| rng.next_gaussian() * 2.0).collect();
        let samples = Matrix::from_vec(30, 6, data);
        let mut prev = f64::INFINITY;
        for k in 1..=6 {
            let p = fit_pca(&samples, k).unwrap();
            let mut err = 0.0;
            for r in 0..samples.rows() {
                let y = p.project(samples.row(r)).unwrap();
                let back = p.reconstruct(&y);
                err += crate::numerics::squared_distance(samples.row(r), &back);
            }
            assert!(
                err <= prev + 1e-9,
                "reconstruction error rose from {prev} to {err} at k={k}"
            );
            prev = err;
        }
        assert!(prev < 1e-18, "full-rank reconstruction should be exact");
    }
}
