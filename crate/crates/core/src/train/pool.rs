//! Joint training of the adapter pool with per-input blend weights.
//!
//! Indicators are built once, before the loop: fit PCA on first-layer query
//! embeddings of the training prompts, project, k-means into N centroids.
//! During training each example combines the pool with its own blend weights
//! (computed from frozen-base embeddings), so gradients reach adapter n
//! scaled by that example's alpha_n. The base model is never touched.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{cosine_lr, AdamW};
use super::{validate_corpus, BatchStream, TrainError, TrainExample};
use crate::adapters::{
    alpha_from_embedding, combine_pool, BaseAdapterPool, BlendWeights, IndicatorSet,
};
use crate::model::{
    backward, first_layer_queries, forward_traced, nll_grad, TransformerWeights,
};
use crate::numerics::{fit_pca, kmeans, Matrix, PcaProjection};
use crate::real::Real;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_bases: usize,
    pub rank: usize,
    pub scaling: f64,
    pub pca_dim: usize,
    /// Disable to cluster raw (uncentered, unrotated) embeddings instead.
    pub use_pca: bool,
    /// Map cosines through (c + 1) / 2 so blend weights stay in [0, 1].
    pub normalize_alphas: bool,
    /// Ablation only: rescale blend weights to sum to one.
    pub sum_to_one: bool,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub max_iters: usize,
    pub seed: u64,
    /// Cap on how many corpus prompts feed the indicator fit.
    pub embedding_sample_cap: usize,
    pub kmeans_max_iters: usize,
}

impl TrainConfig {
    /// Reference recipe: 32 bases, rank 4, scaling 4, AdamW lr 1e-4 cosine,
    /// batch 128, 800 iterations.
    pub fn paper() -> Self {
        Self {
            n_bases: 32,
            rank: 4,
            scaling: 4.0,
            pca_dim: 16,
            use_pca: true,
            normalize_alphas: true,
            sum_to_one: false,
            lr: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 128,
            max_iters: 800,
            seed: 1,
            embedding_sample_cap: 10_000,
            kmeans_max_iters: 100,
        }
    }

    /// Scaled-down profile for minutes-scale CPU runs. The learning rate is
    /// higher than the reference recipe to compensate for the much smaller
    /// batch; anything much hotter destabilizes the joint blend.
    pub fn desk() -> Self {
        Self {
            n_bases: 8,
            batch_size: 32,
            max_iters: 800,
            lr: 6e-4,
            ..Self::paper()
        }
    }
}

/// Per-example diagnostic record: which task the example came from (side
/// channel, never visible to the trainer) and the blend weights it used.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlphaRecord {
    pub iter: usize,
    pub task: Option<String>,
    pub alphas: Vec<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    pub alpha_records: Vec<AlphaRecord>,
    pub wall_clock_secs: f64,
}

impl TrainLog {
    /// One JSON object per line: per-iteration losses and per-example alphas.
    pub fn write_jsonl(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (iter, loss) in self.losses.iter().enumerate() {
            writeln!(f, "{}", serde_json::json!({"type": "loss", "iter": iter, "loss": loss}))?;
        }
        for r in &self.alpha_records {
            writeln!(
                f,
                "{}",
                serde_json::json!({"type": "alpha", "iter": r.iter, "task": r.task, "alphas": r.alphas})
            )?;
        }
        writeln!(
            f,
            "{}",
            serde_json::json!({"type": "summary", "iters": self.losses.len(), "wall_clock_secs": self.wall_clock_secs})
        )?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> std::io::Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut log = TrainLog::default();
        for line in f.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let v: serde_json::Value = serde_json::from_str(&line)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
            match v.get("type").and_then(|t| t.as_str()) {
                Some("loss") => log.losses.push(v["loss"].as_f64().unwrap_or(f64::NAN)),
                Some("alpha") => log.alpha_records.push(AlphaRecord {
                    iter: v["iter"].as_u64().unwrap_or(0) as usize,
                    task: v["task"].as_str().map(str::to_string),
                    alphas: v["alphas"]
                        .as_array()
                        .map(|a| a.iter().filter_map(|x| x.as_f64()).collect())
                        .unwrap_or_default(),
                }),
                Some("summary") => {
                    log.wall_clock_secs = v["wall_clock_secs"].as_f64().unwrap_or(0.0)
                }
                _ => {}
            }
        }
        Ok(log)
    }
}

/// First-layer query embeddings for up to `cap` seeded-sampled prompts,
/// one row per input in corpus order.
pub fn extract_embeddings<T: Real>(
    w: &TransformerWeights<T>,
    corpus: &[TrainExample],
    cap: usize,
    seed: u64,
) -> Result<Matrix<T>, TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let indices: Vec<usize> = if cap >= corpus.len() {
        (0..corpus.len()).collect()
    } else {
        // partial Fisher-Yates, then restore corpus order
        let mut rng = SplitMix64::derive(seed, 0x656d_6264); // "embd"
        let mut all: Vec<usize> = (0..corpus.len()).collect();
        for i in 0..cap {
            let j = i + rng.next_index(all.len() - i);
            all.swap(i, j);
        }
        let mut picked = all[..cap].to_vec();
        picked.sort_unstable();
        picked
    };
    let d = w.config.d_model;
    let mut out = Matrix::zeros(indices.len(), d);
    for (row, &idx) in indices.iter().enumerate() {
        let q = first_layer_queries(w, &corpus[idx].prompt)?;
        out.row_mut(row).copy_from_slice(&q);
    }
    Ok(out)
}

/// PCA fit, projection, and k-means clustering of the embeddings into the
/// per-adapter indicator centroids.
pub fn build_indicators<T: Real>(
    embeddings: &Matrix<T>,
    cfg: &TrainConfig,
) -> Result<IndicatorSet<T>, TrainError> {
    let rows = embeddings.rows();
    if rows < cfg.n_bases {
        return Err(TrainError::IndicatorPoolMismatch {
            indicator: rows,
            config: cfg.n_bases,
        });
    }
    let pca = if cfg.use_pca {
        fit_pca(embeddings, cfg.pca_dim)?
    } else {
        PcaProjection::identity(embeddings.cols())
    };
    let projected = pca.project_rows(embeddings)?;
    let centroids = kmeans(&projected, cfg.n_bases, cfg.seed, cfg.kmeans_max_iters)?;
    Ok(IndicatorSet::new(pca, centroids)?)
}

/// Trains the N base adapters jointly (base model frozen).
///
/// `task_tags`, when provided, must parallel `corpus`; it feeds only the
/// diagnostics log and cannot influence the trained pool.
pub fn train_pool<T: Real>(
    w: &TransformerWeights<T>,
    corpus: &[TrainExample],
    task_tags: Option<&[String]>,
    indicators: &IndicatorSet<T>,
    cfg: &TrainConfig,
) -> Result<(BaseAdapterPool<T>, TrainLog), TrainError> {
    let started = std::time::Instant::now();
    validate_corpus(corpus, w.config.max_seq)?;
    if indicators.n_bases != cfg.n_bases {
        return Err(TrainError::IndicatorPoolMismatch {
            indicator: indicators.n_bases,
            config: cfg.n_bases,
        });
    }
    if let Some(tags) = task_tags {
        assert_eq!(tags.len(), corpus.len(), "task tag side channel misaligned");
    }
    let base_checksum = w.checksum();

    // Blend weights are a pure function of the frozen base, so compute them
    // once per corpus entry.
    let mut alphas_per_example: Vec<BlendWeights<T>> = Vec::with_capacity(corpus.len());
    for ex in corpus {
        let q = first_layer_queries(w, &ex.prompt)?;
        let mut bw = alpha_from_embedding(indicators, &q, cfg.normalize_alphas)?;
        if cfg.sum_to_one {
            bw = bw.into_sum_normalized();
        }
        alphas_per_example.push(bw);
    }

    let mut pool = BaseAdapterPool::<T>::init(&w.config, cfg.n_bases, cfg.rank, cfg.scaling, cfg.seed);
    let n_sites = pool.sites.len();
    let sizes: Vec<usize> = {
        let mut s = Vec::with_capacity(cfg.n_bases * n_sites * 2);
        for n in 0..cfg.n_bases {
            for site in 0..n_sites {
                s.push(pool.pairs[n][site].a.data().len());
                s.push(pool.pairs[n][site].b.data().len());
            }
        }
        s
    };
    let mut opt = AdamW::<T>::new(&sizes, cfg.beta1, cfg.beta2, cfg.weight_decay);
    let mut stream = BatchStream::new(corpus.len(), cfg.seed);
    let mut log = TrainLog::default();

    let scale_over_rank = cfg.scaling / cfg.rank as f64;
    let inv_batch = 1.0 / cfg.batch_size as f64;

    for iter in 0..cfg.max_iters {
        let batch = stream.next_batch(cfg.batch_size);
        // grad buffers in the same flat order as the optimizer state
        let mut grads: Vec<Matrix<T>> = Vec::with_capacity(cfg.n_bases * n_sites * 2);
        for n in 0..cfg.n_bases {
            for site in 0..n_sites {
                let pair = &pool.pairs[n][site];
                grads.push(Matrix::zeros(pair.a.rows(), pair.a.cols()));
                grads.push(Matrix::zeros(pair.b.rows(), pair.b.cols()));
            }
        }
        let mut loss_sum = 0.0f64;

        for &idx in &batch {
            let ex = &corpus[idx];
            let bw = &alphas_per_example[idx];
            let delta = combine_pool(&pool, bw)?;
            let inputs = ex.inputs();
            let (targets, mask) = ex.targets_and_mask();
            let (logits, trace) = forward_traced(w, Some(&delta), &inputs)?;
            let (loss, dlogits) = nll_grad(&logits, &targets, &mask)?;
            loss_sum += loss.to_f64();
            let site_grads = backward(w, Some(&delta), &trace, &dlogits, None)?;

            // chain rule into each adapter: blend weights are constants
            for n in 0..cfg.n_bases {
                let coeff = T::from_f64(scale_over_rank * inv_batch) * bw.alphas[n];
                for site in 0..n_sites {
                    let g = &site_grads.g[site];
                    let pair = &pool.pairs[n][site];
                    let ga = g.matmul_transb(&pair.b); // d x r
                    let gb = pair.a.matmul_transa(g); // r x d
                    let slot = (n * n_sites + site) * 2;
                    grads[slot].add_scaled(&ga, coeff);
                    grads[slot + 1].add_scaled(&gb, coeff);
                }
            }

            log.alpha_records.push(AlphaRecord {
                iter,
                task: task_tags.map(|t| t[idx].clone()),
                alphas: bw.alphas.iter().map(|a| a.to_f64()).collect(),
            });
        }

        let mean_loss = loss_sum * inv_batch;
        if !mean_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { iter });
        }
        log.losses.push(mean_loss);

        let lr_t = cosine_lr(cfg.lr, iter, cfg.max_iters);
        let grefs: Vec<&[T]> = grads.iter().map(|g| g.data()).collect();
        let mut prefs: Vec<&mut [T]> = Vec::with_capacity(grefs.len());
        for per_site in pool.pairs.iter_mut() {
            for pair in per_site.iter_mut() {
                prefs.push(pair.a.data_mut());
                prefs.push(pair.b.data_mut());
            }
        }
        opt.step(lr_t, &mut prefs, &grefs);
    }

    let after = w.checksum();
    if after != base_checksum {
        return Err(TrainError::FrozenBaseViolated {
            before: base_checksum,
            after,
        });
    }
    log.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok((pool, log))
}
