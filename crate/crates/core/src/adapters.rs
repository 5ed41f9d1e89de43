//! Adapter pool data structures and the blending algebra.
//!
//! A pool holds N low-rank adapters per adapted site. Blend weights are
//! cosine similarities between an input embedding (projected through the
//! indicator PCA) and the per-adapter centroids; the combined delta at each
//! site is `(s/r) * sum_n alpha_n A_n B_n`, kept in stacked low-rank form.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::model::{DeltaSet, ModelConfig, SiteDelta, SiteId};
use crate::numerics::{cosine_similarity, CentroidSet, Matrix, NumericsError, PcaProjection};
use crate::real::Real;
use crate::rng::SplitMix64;
use crate::tensor_io::{TensorArchive, TensorIoError};

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("count mismatch in {context}: expected {expected}, got {got}")]
    CountMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("pool file invalid: {0}")]
    InvalidFile(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] TensorIoError),
}

/// One low-rank factor pair. The delta contribution is `(s/r) * a * b`.
#[derive(Debug, Clone)]
pub struct LoraPair<T> {
    /// `d_model x rank`
    pub a: Matrix<T>,
    /// `rank x d_model`
    pub b: Matrix<T>,
}

/// N jointly trained base adapters covering identical sites.
#[derive(Debug, Clone)]
pub struct BaseAdapterPool<T> {
    pub n_bases: usize,
    pub rank: usize,
    pub scaling: f64,
    pub d_model: usize,
    pub sites: Vec<SiteId>,
    /// `pairs[n][site_index]`
    pub pairs: Vec<Vec<LoraPair<T>>>,
}

impl<T: Real> BaseAdapterPool<T> {
    /// Standard init: A seeded small-uniform in (-1/sqrt(d), 1/sqrt(d)),
    /// B zero, so the initial delta vanishes and training starts from the
    /// base model.
    pub fn init(
        config: &ModelConfig,
        n_bases: usize,
        rank: usize,
        scaling: f64,
        seed: u64,
    ) -> Self {
        let d = config.d_model;
        let bound = 1.0 / (d as f64).sqrt();
        let mut rng = SplitMix64::derive(seed, 0x6c6f_7261); // "lora"
        let sites = config.sites();
        let mut pairs = Vec::with_capacity(n_bases);
        for _n in 0..n_bases {
            let mut per_site = Vec::with_capacity(sites.len());
            for _s in 0..sites.len() {
                let a = Matrix::from_vec(
                    d,
                    rank,
                    (0..d * rank)
                        .map(|_| T::from_f64(rng.next_range(-bound, bound)))
                        .collect(),
                );
                per_site.push(LoraPair {
                    a,
                    b: Matrix::zeros(rank, d),
                });
            }
            pairs.push(per_site);
        }
        Self {
            n_bases,
            rank,
            scaling,
            d_model: d,
            sites,
            pairs,
        }
    }

    pub fn pair(&self, n: usize, site: SiteId) -> &LoraPair<T> {
        &self.pairs[n][site.index()]
    }

    pub fn pair_mut(&mut self, n: usize, site: SiteId) -> &mut LoraPair<T> {
        &mut self.pairs[n][site.index()]
    }

    /// Fingerprint over all factor tensors in canonical order.
    pub fn checksum(&self) -> u64 {
        self.to_archive(None).blob_checksum()
    }

    fn to_archive(&self, indicators: Option<&IndicatorSet<T>>) -> TensorArchive {
        let mut config = json!({
            "kind": "adapter_pool",
            "n_bases": self.n_bases,
            "rank": self.rank,
            "scaling": self.scaling,
            "d_model": self.d_model,
            "sites": self.sites,
            "dtype": T::DTYPE,
        });
        if let Some(ind) = indicators {
            config["pca"] = json!({
                "input_dim": ind.pca.input_dim,
                "out_dim": ind.pca.out_dim,
                "rank_deficient": ind.pca.rank_deficient,
            });
        }
        let mut a = TensorArchive::new(config);
        for (n, per_site) in self.pairs.iter().enumerate() {
            for (s, pair) in per_site.iter().enumerate() {
                a.push_matrix(&format!("adapter.{n}.site.{s}.a"), &pair.a);
                a.push_matrix(&format!("adapter.{n}.site.{s}.b"), &pair.b);
            }
        }
        if let Some(ind) = indicators {
            a.push_vector("pca.mean", &ind.pca.mean);
            a.push_matrix("pca.components", &ind.pca.components);
            a.push_vector("pca.eigenvalues", &ind.pca.eigenvalues);
            a.push_matrix("centroids", &ind.centroids.centroids);
        }
        a
    }
}

/// PCA projection plus per-adapter centroids: the device-side matching state.
#[derive(Debug, Clone)]
pub struct IndicatorSet<T> {
    pub pca: PcaProjection<T>,
    pub centroids: CentroidSet<T>,
    pub n_bases: usize,
}

impl<T: Real> IndicatorSet<T> {
    pub fn new(pca: PcaProjection<T>, centroids: CentroidSet<T>) -> Result<Self, AdapterError> {
        if pca.out_dim != centroids.dim() {
            return Err(AdapterError::CountMismatch {
                context: "indicator pca out_dim vs centroid dim",
                expected: pca.out_dim,
                got: centroids.dim(),
            });
        }
        let n_bases = centroids.n();
        Ok(Self {
            pca,
            centroids,
            n_bases,
        })
    }
}

/// The N-vector of blend weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlendWeights<T> {
    pub alphas: Vec<T>,
    /// Whether the (cos + 1) / 2 map was applied.
    pub normalized: bool,
}

impl<T: Real> BlendWeights<T> {
    pub fn new(alphas: Vec<T>, normalized: bool) -> Self {
        Self { alphas, normalized }
    }

    pub fn n(&self) -> usize {
        self.alphas.len()
    }

    /// Optional ablation: rescale so the weights sum to one.
    pub fn into_sum_normalized(mut self) -> Self {
        let mut total = T::ZERO;
        for &a in &self.alphas {
            total += a;
        }
        if total != T::ZERO {
            let inv = T::ONE / total;
            for a in self.alphas.iter_mut() {
                *a *= inv;
            }
        }
        self
    }
}

/// Computes blend weights for an embedding: project through the indicator
/// PCA, then cosine similarity against each centroid, optionally mapped to
/// [0, 1] via `(cos + 1) / 2`.
pub fn alpha_from_embedding<T: Real>(
    ind: &IndicatorSet<T>,
    q: &[T],
    normalize: bool,
) -> Result<BlendWeights<T>, AdapterError> {
    let projected = ind.pca.project(q)?;
    if projected.iter().all(|v| *v == T::ZERO) {
        return Err(AdapterError::Numerics(NumericsError::ZeroVector {
            context: "alpha_from_embedding projected query",
        }));
    }
    let half = T::from_f64(0.5);
    let mut alphas = Vec::with_capacity(ind.n_bases);
    for n in 0..ind.n_bases {
        let c = cosine_similarity(&projected, ind.centroids.centroid(n))?;
        alphas.push(if normalize { (c + T::ONE) * half } else { c });
    }
    Ok(BlendWeights::new(alphas, normalize))
}

/// Builds the stacked factors for one site: columns of every adapter's A
/// side by side, and the B row-blocks scaled by `alpha_n * s / r`.
fn stack_site<T: Real>(
    pool: &BaseAdapterPool<T>,
    weights: &BlendWeights<T>,
    site_index: usize,
) -> (Matrix<T>, Matrix<T>) {
    let d = pool.d_model;
    let r = pool.rank;
    let n = pool.n_bases;
    let scale_base = T::from_f64(pool.scaling / r as f64);

    let mut a_stack = Matrix::zeros(d, n * r);
    let mut b_stack = Matrix::zeros(n * r, d);
    for (idx, per_site) in pool.pairs.iter().enumerate() {
        let pair = &per_site[site_index];
        let coeff = scale_base * weights.alphas[idx];
        for row in 0..d {
            let dst = &mut a_stack.row_mut(row)[idx * r..(idx + 1) * r];
            dst.copy_from_slice(pair.a.row(row));
        }
        for rr in 0..r {
            let dst = b_stack.row_mut(idx * r + rr);
            for (o, &v) in dst.iter_mut().zip(pair.b.row(rr).iter()) {
                *o = coeff * v;
            }
        }
    }
    (a_stack, b_stack)
}

fn check_counts<T: Real>(
    pool: &BaseAdapterPool<T>,
    weights: &BlendWeights<T>,
) -> Result<(), AdapterError> {
    if weights.n() != pool.n_bases {
        return Err(AdapterError::CountMismatch {
            context: "blend weights vs pool n_bases",
            expected: pool.n_bases,
            got: weights.n(),
        });
    }
    Ok(())
}

/// Combines the pool under the given blend weights into a per-site delta set
/// (stacked low-rank form). Used by the training forward pass.
pub fn combine_pool<T: Real>(
    pool: &BaseAdapterPool<T>,
    weights: &BlendWeights<T>,
) -> Result<DeltaSet<T>, AdapterError> {
    check_counts(pool, weights)?;
    let mut deltas = Vec::with_capacity(pool.sites.len());
    for s in 0..pool.sites.len() {
        let (a, b) = stack_site(pool, weights, s);
        deltas.push(SiteDelta::Stacked { a, b });
    }
    DeltaSet::from_site_deltas(pool.d_model, deltas).map_err(|_| AdapterError::CountMismatch {
        context: "delta shapes vs pool d_model",
        expected: pool.d_model,
        got: 0,
    })
}

/// Provenance of a customized adapter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub alphas: Vec<f64>,
    pub pool_checksum: u64,
}

/// Training-free blend of the pool: the customized adapter in stacked
/// low-rank form (effective rank `N * r`) plus provenance.
#[derive(Debug, Clone)]
pub struct CustomizedAdapter<T> {
    pub sites: Vec<SiteId>,
    /// `(a_stack, b_stack)` per site, blend weights folded into `b_stack`.
    pub stacks: Vec<(Matrix<T>, Matrix<T>)>,
    pub d_model: usize,
    pub effective_rank: usize,
    pub provenance: Provenance,
}

impl<T: Real> CustomizedAdapter<T> {
    /// The delta set this adapter applies to a model.
    pub fn to_delta_set(&self, config: &ModelConfig) -> Result<DeltaSet<T>, crate::model::ModelError> {
        let deltas = self
            .stacks
            .iter()
            .map(|(a, b)| SiteDelta::Stacked {
                a: a.clone(),
                b: b.clone(),
            })
            .collect();
        DeltaSet::new(config, deltas)
    }

    /// Dense materialization per site, `(s/r) * sum_n alpha_n A_n B_n`.
    pub fn dense_sites(&self) -> Vec<Matrix<T>> {
        self.stacks.iter().map(|(a, b)| a.matmul(b)).collect()
    }
}

/// Blends a customized adapter from the pool without any training; the math
/// is identical to [`combine_pool`] (one shared stacking path).
pub fn blend_customized<T: Real>(
    pool: &BaseAdapterPool<T>,
    weights: &BlendWeights<T>,
) -> Result<CustomizedAdapter<T>, AdapterError> {
    check_counts(pool, weights)?;
    let mut stacks = Vec::with_capacity(pool.sites.len());
    for s in 0..pool.sites.len() {
        stacks.push(stack_site(pool, weights, s));
    }
    Ok(CustomizedAdapter {
        sites: pool.sites.clone(),
        stacks,
        d_model: pool.d_model,
        effective_rank: pool.n_bases * pool.rank,
        provenance: Provenance {
            alphas: weights.alphas.iter().map(|a| a.to_f64()).collect(),
            pool_checksum: pool.checksum(),
        },
    })
}

/// Saves pool plus indicators with a blob checksum stamped in the manifest.
pub fn save_pool<T: Real>(
    pool: &BaseAdapterPool<T>,
    indicators: &IndicatorSet<T>,
    path: &Path,
) -> Result<u64, AdapterError> {
    let mut archive = pool.to_archive(Some(indicators));
    let checksum = archive.blob_checksum();
    archive.config["checksum"] = json!(format!("{checksum:016x}"));
    archive.write(path)?;
    Ok(checksum)
}

/// Loads a pool file, validating counts, shapes, and the stored checksum.
pub fn load_pool<T: Real>(
    path: &Path,
) -> Result<(BaseAdapterPool<T>, IndicatorSet<T>, u64), AdapterError> {
    let archive = TensorArchive::read(path)?;
    pool_from_archive(&archive)
}

pub fn pool_from_archive<T: Real>(
    archive: &TensorArchive,
) -> Result<(BaseAdapterPool<T>, IndicatorSet<T>, u64), AdapterError> {
    let cfg = &archive.config;
    let field = |name: &str| -> Result<u64, AdapterError> {
        cfg.get(name)
            .and_then(|v| v.as_u64())
            .ok_or_else(|| AdapterError::InvalidFile(format!("missing field {name}")))
    };
    let n_bases = field("n_bases")? as usize;
    let rank = field("rank")? as usize;
    let d_model = field("d_model")? as usize;
    let scaling = cfg
        .get("scaling")
        .and_then(|v| v.as_f64())
        .ok_or_else(|| AdapterError::InvalidFile("missing field scaling".into()))?;
    let sites: Vec<SiteId> = serde_json::from_value(
        cfg.get("sites")
            .cloned()
            .ok_or_else(|| AdapterError::InvalidFile("missing field sites".into()))?,
    )
    .map_err(|e| AdapterError::InvalidFile(format!("sites: {e}")))?;

    // Every declared adapter must be present with the declared shape; a
    // manifest n_bases that disagrees with the stored tensors is an error
    // naming the field.
    let mut pairs = Vec::with_capacity(n_bases);
    for n in 0..n_bases {
        let mut per_site = Vec::with_capacity(sites.len());
        for s in 0..sites.len() {
            let a = archive
                .matrix_expect(&format!("adapter.{n}.site.{s}.a"), d_model, rank)
                .map_err(|e| match e {
                    TensorIoError::MissingTensor(_) => AdapterError::InvalidFile(format!(
                        "n_bases={n_bases} declared but adapter.{n}.site.{s}.a is missing"
                    )),
                    other => AdapterError::Io(other),
                })?;
            let b = archive.matrix_expect(&format!("adapter.{n}.site.{s}.b"), rank, d_model)?;
            per_site.push(LoraPair { a, b });
        }
        pairs.push(per_site);
    }
    let extra = format!("adapter.{n_bases}.site.0.a");
    if archive.get(&extra).is_ok() {
        return Err(AdapterError::InvalidFile(format!(
            "n_bases={n_bases} declared but more adapter tensors are present"
        )));
    }

    let pool = BaseAdapterPool {
        n_bases,
        rank,
        scaling,
        d_model,
        sites,
        pairs,
    };

    let pca_meta = cfg
        .get("pca")
        .ok_or_else(|| AdapterError::InvalidFile("missing field pca".into()))?;
    let input_dim = pca_meta
        .get("input_dim")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| AdapterError::InvalidFile("missing field pca.input_dim".into()))?
        as usize;
    let out_dim = pca_meta
        .get("out_dim")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| AdapterError::InvalidFile("missing field pca.out_dim".into()))?
        as usize;
    let rank_deficient = pca_meta
        .get("rank_deficient")
        .and_then(|v| v.as_bool())
        .unwrap_or(false);
    let pca = PcaProjection {
        mean: archive.vector("pca.mean")?,
        components: archive.matrix_expect("pca.components", out_dim, input_dim)?,
        input_dim,
        out_dim,
        eigenvalues: archive.vector("pca.eigenvalues")?,
        rank_deficient,
    };
    let centroids = CentroidSet {
        centroids: archive.matrix_expect("centroids", n_bases, out_dim)?,
    };
    let indicators = IndicatorSet::new(pca, centroids)?;

    let stored = cfg
        .get("checksum")
        .and_then(|v| v.as_str())
        .ok_or_else(|| AdapterError::InvalidFile("missing field checksum".into()))?;
    let actual = archive.blob_checksum();
    if stored != format!("{actual:016x}") {
        return Err(AdapterError::InvalidFile(format!(
            "checksum mismatch: stored {stored}, computed {actual:016x}"
        )));
    }

    Ok((pool, indicators, actual))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Precision;
    use approx::assert_relative_eq;

    fn model_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 8,
            d_model: 4,
            n_layers: 1,
            n_heads: 1,
            d_ff: 8,
            max_seq: 4,
            precision: Precision::F64,
        }
    }

    fn indicator_3() -> IndicatorSet<f64> {
        // hand-built centroids (1,0), (0,1), (-1,0) behind an identity PCA
        let pca = PcaProjection::identity(2);
        let centroids = CentroidSet {
            centroids: Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]),
        };
        IndicatorSet::new(pca, centroids).unwrap()
    }

    #[test]
    fn alpha_exact_match_is_one() {
        let ind = indicator_3();
        let w = alpha_from_embedding(&ind, &[2.0, 0.0], true).unwrap();
        assert_relative_eq!(w.alphas[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn alpha_orthogonal_is_half_normalized_zero_raw() {
        let ind = indicator_3();
        let n = alpha_from_embedding(&ind, &[0.0, 3.0], true).unwrap();
        assert_relative_eq!(n.alphas[0], 0.5, epsilon = 1e-12);
        let r = alpha_from_embedding(&ind, &[0.0, 3.0], false).unwrap();
        assert_relative_eq!(r.alphas[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn alpha_three_centroids_derived() {
        let ind = indicator_3();
        let w = alpha_from_embedding(&ind, &[1.0, 0.0], true).unwrap();
        assert_relative_eq!(w.alphas[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(w.alphas[1], 0.5, epsilon = 1e-12);
        assert_relative_eq!(w.alphas[2], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn alpha_scale_invariant_exactly() {
        let ind = indicator_3();
        let a = alpha_from_embedding(&ind, &[0.3, 0.7], true).unwrap();
        let b = alpha_from_embedding(&ind, &[0.6, 1.4], true).unwrap();
        // cosine is exactly invariant to doubling here: same bits expected
        for (x, y) in a.alphas.iter().zip(b.alphas.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    fn pool_2x2(a1b1: [[f64; 2]; 2], a2b2: [[f64; 2]; 2]) -> BaseAdapterPool<f64> {
        // rank-2 exact factorization: A = M, B = I
        let mk = |m: [[f64; 2]; 2]| LoraPair {
            a: Matrix::from_rows(&[vec![m[0][0], m[0][1]], vec![m[1][0], m[1][1]]]),
            b: Matrix::identity(2),
        };
        BaseAdapterPool {
            n_bases: 2,
            rank: 2,
            scaling: 2.0, // s/r = 1
            d_model: 2,
            sites: vec![SiteId { layer: 0, proj: crate::model::Proj::Q }],
            pairs: vec![vec![mk(a1b1)], vec![mk(a2b2)]],
        }
    }

    #[test]
    fn combine_weighted_sum_oracle() {
        // A1 B1 = [[1,0],[0,0]], A2 B2 = [[0,0],[0,2]], alpha = (0.5, 1), s/r = 1
        let pool = pool_2x2([[1.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [0.0, 2.0]]);
        let w = BlendWeights::new(vec![0.5, 1.0], true);
        let delta = combine_pool(&pool, &w).unwrap();
        let dense = delta.sites()[0].dense();
        assert_eq!(dense.data(), &[0.5, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn combine_all_zero_alphas() {
        let pool = pool_2x2([[1.0, 2.0], [3.0, 4.0]], [[5.0, 6.0], [7.0, 8.0]]);
        let w = BlendWeights::new(vec![0.0, 0.0], true);
        let delta = combine_pool(&pool, &w).unwrap();
        assert!(delta.sites()[0].dense().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn degenerate_pool_is_plain_product() {
        // N=1, alpha=1, s=r: delta = A B
        let mut pool = pool_2x2([[1.0, 2.0], [3.0, 4.0]], [[0.0; 2]; 2]);
        pool.n_bases = 1;
        pool.pairs.truncate(1);
        let w = BlendWeights::new(vec![1.0], true);
        let delta = combine_pool(&pool, &w).unwrap();
        assert_eq!(delta.sites()[0].dense().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn blend_matches_combine_dense() {
        let pool = pool_2x2([[1.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [0.0, 2.0]]);
        let w = BlendWeights::new(vec![0.5, 1.0], true);
        let combined = combine_pool(&pool, &w).unwrap().sites()[0].dense();
        let blended = blend_customized(&pool, &w).unwrap().dense_sites()[0].clone();
        assert_eq!(combined.data(), blended.data());
    }

    #[test]
    fn one_hot_blend_selects_base_adapter() {
        let pool = pool_2x2([[1.0, 2.0], [3.0, 4.0]], [[5.0, 6.0], [7.0, 8.0]]);
        let w = BlendWeights::new(vec![0.0, 1.0], true);
        let blended = blend_customized(&pool, &w).unwrap().dense_sites()[0].clone();
        assert_eq!(blended.data(), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn permuted_pool_with_permuted_alphas_is_identical() {
        let pool_ab = pool_2x2([[1.0, 2.0], [3.0, 4.0]], [[5.0, 6.0], [7.0, 8.0]]);
        let pool_ba = pool_2x2([[5.0, 6.0], [7.0, 8.0]], [[1.0, 2.0], [3.0, 4.0]]);
        let w_ab = BlendWeights::new(vec![0.25, 0.75], true);
        let w_ba = BlendWeights::new(vec![0.75, 0.25], true);
        let d_ab = blend_customized(&pool_ab, &w_ab).unwrap().dense_sites()[0].clone();
        let d_ba = blend_customized(&pool_ba, &w_ba).unwrap().dense_sites()[0].clone();
        assert!(d_ab.max_abs_diff(&d_ba) < 1e-15);
    }

    #[test]
    fn alpha_count_mismatch_rejected() {
        let pool = pool_2x2([[1.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [0.0, 2.0]]);
        let w = BlendWeights::new(vec![0.5], true);
        assert!(matches!(
            combine_pool(&pool, &w),
            Err(AdapterError::CountMismatch { .. })
        ));
    }

    #[test]
    fn linearity_and_scale_equivariance() {
        let cfg = model_cfg();
        let pool = BaseAdapterPool::<f64>::init(&cfg, 3, 2, 4.0, 17);
        // give B nonzero content
        let mut pool = pool;
        let mut rng = SplitMix64::new(3);
        for per_site in pool.pairs.iter_mut() {
            for pair in per_site.iter_mut() {
                for v in pair.b.data_mut() {
                    *v = rng.next_gaussian();
                }
            }
        }
        let wa = BlendWeights::new(vec![0.2, -0.4, 0.9], false);
        let wb = BlendWeights::new(vec![0.5, 0.1, -0.3], false);
        let sum = BlendWeights::new(
            wa.alphas.iter().zip(&wb.alphas).map(|(x, y)| x + y).collect(),
            false,
        );
        let da = combine_pool(&pool, &wa).unwrap();
        let db = combine_pool(&pool, &wb).unwrap();
        let dsum = combine_pool(&pool, &sum).unwrap();
        for s in 0..pool.sites.len() {
            let mut lhs = da.sites()[s].dense();
            lhs.add_scaled(&db.sites()[s].dense(), 1.0);
            assert!(lhs.max_abs_diff(&dsum.sites()[s].dense()) < 1e-9);
        }

        let scaled = BlendWeights::new(wa.alphas.iter().map(|x| 3.0 * x).collect(), false);
        let dscaled = combine_pool(&pool, &scaled).unwrap();
        for s in 0..pool.sites.len() {
            let mut lhs = da.sites()[s].dense();
            lhs.scale(3.0);
            assert!(lhs.max_abs_diff(&dscaled.sites()[s].dense()) < 1e-9);
        }
    }

    #[test]
    fn pool_round_trip_checksum_equal() {
        let cfg = model_cfg();
        let pool = BaseAdapterPool::<f64>::init(&cfg, 2, 2, 4.0, 5);
        let samples = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.9, 0.1, 0.0, 0.0],
            vec![0.1, 0.9, 0.0, 0.0],
        ]);
        let pca = crate::numerics::fit_pca(&samples, 2).unwrap();
        let projected = pca.project_rows(&samples).unwrap();
        let centroids = crate::numerics::kmeans(&projected, 2, 1, 50).unwrap();
        let ind = IndicatorSet::new(pca, centroids).unwrap();

        let dir = std::env::temp_dir().join(format!("pool_rt_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("pool.bin");
        let saved = save_pool(&pool, &ind, &path).unwrap();
        let (pool2, ind2, loaded) = load_pool::<f64>(&path).unwrap();
        assert_eq!(saved, loaded);
        assert_eq!(pool.checksum(), pool2.checksum());
        assert_eq!(ind.n_bases, ind2.n_bases);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn truncated_pool_file_rejected() {
        let cfg = model_cfg();
        let pool = BaseAdapterPool::<f64>::init(&cfg, 2, 2, 4.0, 6);
        let ind = IndicatorSet::new(
            PcaProjection::identity(4),
            CentroidSet {
                centroids: Matrix::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]]),
            },
        )
        .unwrap();
        let dir = std::env::temp_dir().join(format!("pool_tr_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("pool.bin");
        save_pool(&pool, &ind, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(load_pool::<f64>(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn wrong_n_bases_in_manifest_names_the_field() {
        let cfg = model_cfg();
        let pool = BaseAdapterPool::<f64>::init(&cfg, 2, 2, 4.0, 7);
        let ind = IndicatorSet::new(
            PcaProjection::identity(4),
            CentroidSet {
                centroids: Matrix::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]]),
            },
        )
        .unwrap();
        let mut archive = pool.to_archive(Some(&ind));
        let checksum = archive.blob_checksum();
        archive.config["checksum"] = json!(format!("{checksum:016x}"));
        archive.config["n_bases"] = json!(3); // lies about the tensor count
        let err = pool_from_archive::<f64>(&archive).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("n_bases"), "error should name the field: {msg}");
    }
}
