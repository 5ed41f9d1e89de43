//! Additive low-rank weight deltas for the adapted projection sites.

use super::config::{ModelConfig, SiteId};
use super::ModelError;
use crate::numerics::Matrix;
use crate::real::Real;

/// Delta for one projection site, either materialized dense or kept in
/// stacked low-rank form. In stacked form the scaling (blend weight times
/// s/r) is folded into the row blocks of `b`, so the dense equivalent is
/// exactly `a * b`.
#[derive(Debug, Clone)]
pub enum SiteDelta<T> {
    Dense(Matrix<T>),
    Stacked { a: Matrix<T>, b: Matrix<T> },
}

impl<T: Real> SiteDelta<T> {
    pub fn dense(&self) -> Matrix<T> {
        match self {
            SiteDelta::Dense(m) => m.clone(),
            SiteDelta::Stacked { a, b } => a.matmul(b),
        }
    }

    /// Effective rank of the representation (d for dense).
    pub fn rank(&self) -> usize {
        match self {
            SiteDelta::Dense(m) => m.rows(),
            SiteDelta::Stacked { a, .. } => a.cols(),
        }
    }

    /// `x * delta`, without materializing the dense form.
    pub fn apply(&self, x: &Matrix<T>) -> Matrix<T> {
        match self {
            SiteDelta::Dense(m) => x.matmul(m),
            SiteDelta::Stacked { a, b } => x.matmul(a).matmul(b),
        }
    }

    /// `dy * delta^T`, the backward counterpart of [`Self::apply`].
    pub fn apply_transposed(&self, dy: &Matrix<T>) -> Matrix<T> {
        match self {
            SiteDelta::Dense(m) => dy.matmul_transb(m),
            SiteDelta::Stacked { a, b } => dy.matmul_transb(b).matmul_transb(a),
        }
    }

    fn check_shape(&self, d: usize, site: SiteId) -> Result<(), ModelError> {
        let ok = match self {
            SiteDelta::Dense(m) => m.rows() == d && m.cols() == d,
            SiteDelta::Stacked { a, b } => {
                a.rows() == d && b.cols() == d && a.cols() == b.rows()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(ModelError::DeltaShape {
                site: site.name(),
            })
        }
    }
}

/// One delta per adapted site, aligned with [`ModelConfig::sites`].
#[derive(Debug, Clone)]
pub struct DeltaSet<T> {
    deltas: Vec<SiteDelta<T>>,
}

impl<T: Real> DeltaSet<T> {
    pub fn new(config: &ModelConfig, deltas: Vec<SiteDelta<T>>) -> Result<Self, ModelError> {
        if deltas.len() != config.n_sites() {
            return Err(ModelError::DeltaShape {
                site: format!("expected {} site deltas, got {}", config.n_sites(), deltas.len()),
            });
        }
        for (site, delta) in config.sites().iter().zip(deltas.iter()) {
            delta.check_shape(config.d_model, *site)?;
        }
        Ok(Self { deltas })
    }

    /// Builds from raw per-site deltas in canonical order, checking shapes
    /// only; the site count is validated against the model at forward time.
    pub fn from_site_deltas(d_model: usize, deltas: Vec<SiteDelta<T>>) -> Result<Self, ModelError> {
        for (i, delta) in deltas.iter().enumerate() {
            delta.check_shape(
                d_model,
                SiteId {
                    layer: i / 2,
                    proj: if i % 2 == 0 { super::config::Proj::Q } else { super::config::Proj::V },
                },
            )?;
        }
        Ok(Self { deltas })
    }

    pub fn n_sites(&self) -> usize {
        self.deltas.len()
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        Self {
            deltas: (0..config.n_sites())
                .map(|_| SiteDelta::Dense(Matrix::zeros(d, d)))
                .collect(),
        }
    }

    pub fn site(&self, site: SiteId) -> &SiteDelta<T> {
        &self.deltas[site.index()]
    }

    pub fn sites(&self) -> &[SiteDelta<T>] {
        &self.deltas
    }

    /// Dense materialization of every site.
    pub fn to_dense(&self) -> Self {
        Self {
            deltas: self.deltas.iter().map(|d| SiteDelta::Dense(d.dense())).collect(),
        }
    }
}
