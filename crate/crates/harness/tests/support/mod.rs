//! Independently coded single-adapter trainer used as the bitwise oracle for
//! the degenerate N=1 pool. The orchestration here - seeding, batch order,
//! blend-weight computation, chain rule, optimizer updates - is written from
//! the documented recipe without calling the pool trainer; only the model
//! forward/backward and the low-level numeric kernels are shared, since
//! their summation orders are part of their contracts.

use lorapool_core::adapters::IndicatorSet;
use lorapool_core::model::{
    backward, first_layer_queries, forward_traced, nll_grad, DeltaSet, SiteDelta,
    TransformerWeights,
};
use lorapool_core::numerics::{cosine_similarity, dot, Matrix};
use lorapool_core::train::{TrainConfig, TrainExample};

/// Local splitmix64 copy (Steele et al. finalizer), matching the published
/// generator the crate commits to.
struct Mix {
    state: u64,
}

impl Mix {
    fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    fn derive(seed: u64, tag: u64) -> Self {
        let mut m = Self::new(seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        m.next_u64();
        m
    }

    fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    fn next_index(&mut self, n: usize) -> usize {
        ((self.next_f64() * n as f64) as usize).min(n - 1)
    }

    fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_index(i + 1);
            items.swap(i, j);
        }
    }
}

/// Epoch-shuffled index stream, reimplemented from the documented scheme.
struct Batches {
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    seed: u64,
}

impl Batches {
    fn new(n: usize, seed: u64) -> Self {
        let mut b = Self {
            order: (0..n).collect(),
            cursor: 0,
            epoch: 0,
            seed,
        };
        b.reshuffle();
        b
    }

    fn reshuffle(&mut self) {
        let mut rng = Mix::derive(self.seed, 0x6261_7463_68 ^ self.epoch);
        for (i, o) in self.order.iter_mut().enumerate() {
            *o = i;
        }
        rng.shuffle(&mut self.order);
        self.cursor = 0;
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor >= self.order.len() {
                self.epoch += 1;
                self.reshuffle();
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// AdamW exactly as documented: decoupled decay, bias-corrected moments,
/// `p -= lr * (mhat / (sqrt(vhat) + eps) + wd * p)`.
struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u32,
    beta1: f64,
    beta2: f64,
    wd: f64,
}

impl Adam {
    fn new(sizes: &[usize], beta1: f64, beta2: f64, wd: f64) -> Self {
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            beta1,
            beta2,
            wd,
        }
    }

    fn step(&mut self, lr: f64, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        self.t += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let inv_bc1 = 1.0 / (1.0 - b1.powi(self.t as i32));
        let inv_bc2 = 1.0 / (1.0 - b2.powi(self.t as i32));
        let eps = 1e-8;
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] * inv_bc1;
                let vhat = v[i] * inv_bc2;
                let update = mhat / (vhat.sqrt() + eps) + self.wd * p[i];
                p[i] -= lr * update;
            }
        }
    }
}

fn cosine_lr(base: f64, t: usize, total: usize) -> f64 {
    base * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos())
}

/// Trains a single adapter (A, B per site) and returns the final factors.
pub fn single_lora_oracle(
    w: &TransformerWeights<f64>,
    corpus: &[TrainExample],
    indicators: &IndicatorSet<f64>,
    cfg: &TrainConfig,
) -> (Vec<Matrix<f64>>, Vec<Matrix<f64>>) {
    assert_eq!(cfg.n_bases, 1, "oracle is the single-adapter trainer");
    let d = w.config.d_model;
    let r = cfg.rank;
    let sites = w.config.sites();

    // seeded small-uniform A in (-1/sqrt(d), 1/sqrt(d)), zero B
    let bound = 1.0 / (d as f64).sqrt();
    let mut init_rng = Mix::derive(cfg.seed, 0x6c6f_7261);
    let mut a_site: Vec<Matrix<f64>> = Vec::with_capacity(sites.len());
    let mut b_site: Vec<Matrix<f64>> = Vec::with_capacity(sites.len());
    for _ in 0..sites.len() {
        let a = Matrix::from_vec(
            d,
            r,
            (0..d * r).map(|_| init_rng.next_range(-bound, bound)).collect(),
        );
        a_site.push(a);
        b_site.push(Matrix::zeros(r, d));
    }

    // per-example blend weight: cosine of the projected first-layer query
    // embedding against the single centroid, mapped through (c + 1) / 2
    let mut alphas = Vec::with_capacity(corpus.len());
    for ex in corpus {
        let q = first_layer_queries(w, &ex.prompt).unwrap();
        let centered: Vec<f64> = q
            .iter()
            .zip(indicators.pca.mean.iter())
            .map(|(x, m)| x - m)
            .collect();
        let mut projected = Vec::with_capacity(indicators.pca.out_dim);
        for row in 0..indicators.pca.out_dim {
            projected.push(dot(indicators.pca.components.row(row), &centered));
        }
        let c = cosine_similarity(&projected, indicators.centroids.centroid(0)).unwrap();
        let alpha = if cfg.normalize_alphas { (c + 1.0) * 0.5 } else { c };
        alphas.push(alpha);
    }

    let scale_base = cfg.scaling / r as f64;
    let inv_batch = 1.0 / cfg.batch_size as f64;
    let mut sizes = Vec::new();
    for s in 0..sites.len() {
        sizes.push(a_site[s].data().len());
        sizes.push(b_site[s].data().len());
    }
    let mut opt = Adam::new(&sizes, cfg.beta1, cfg.beta2, cfg.weight_decay);
    let mut stream = Batches::new(corpus.len(), cfg.seed);

    for iter in 0..cfg.max_iters {
        let batch = stream.next_batch(cfg.batch_size);
        let mut grads: Vec<Matrix<f64>> = Vec::new();
        for s in 0..sites.len() {
            grads.push(Matrix::zeros(a_site[s].rows(), a_site[s].cols()));
            grads.push(Matrix::zeros(b_site[s].rows(), b_site[s].cols()));
        }
        for &idx in &batch {
            let ex = &corpus[idx];
            let alpha = alphas[idx];
            // stacked delta with the blend scaling folded into B
            let coeff_b = scale_base * alpha;
            let mut deltas = Vec::with_capacity(sites.len());
            for s in 0..sites.len() {
                let mut b_scaled = Matrix::zeros(r, d);
                for (o, &v) in b_scaled.data_mut().iter_mut().zip(b_site[s].data()) {
                    *o = coeff_b * v;
                }
                deltas.push(SiteDelta::Stacked {
                    a: a_site[s].clone(),
                    b: b_scaled,
                });
            }
            let delta = DeltaSet::from_site_deltas(d, deltas).unwrap();

            let inputs = ex.inputs();
            let (targets, mask) = ex.targets_and_mask();
            let (logits, trace) = forward_traced(w, Some(&delta), &inputs).unwrap();
            let (_loss, dlogits) = nll_grad(&logits, &targets, &mask).unwrap();
            let site_grads = backward(w, Some(&delta), &trace, &dlogits, None).unwrap();

            let coeff = scale_base * inv_batch * alpha;
            for s in 0..sites.len() {
                let g = &site_grads.g[s];
                let ga = g.matmul_transb(&b_site[s]);
                let gb = a_site[s].matmul_transa(g);
                grads[s * 2].add_scaled(&ga, coeff);
                grads[s * 2 + 1].add_scaled(&gb, coeff);
            }
        }
        let lr_t = cosine_lr(cfg.lr, iter, cfg.max_iters);
        let grefs: Vec<&[f64]> = grads.iter().map(|g| g.data()).collect();
        let mut prefs: Vec<&mut [f64]> = Vec::new();
        for (a, b) in a_site.iter_mut().zip(b_site.iter_mut()) {
            prefs.push(a.data_mut());
            prefs.push(b.data_mut());
        }
        opt.step(lr_t, &mut prefs, &grefs);
    }
    (a_site, b_site)
}
