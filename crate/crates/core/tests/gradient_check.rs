//! Central finite-difference checks of the analytic adapter gradients.

use lorapool_core::adapters::{combine_pool, BaseAdapterPool, BlendWeights};
use lorapool_core::model::{
    backward, forward, forward_traced, nll_grad, nll_loss, ModelConfig, Precision,
    TransformerWeights,
};
use lorapool_core::rng::SplitMix64;
use lorapool_core::train::TrainExample;

struct Fixture {
    w: TransformerWeights<f64>,
    pool: BaseAdapterPool<f64>,
    batch: Vec<(TrainExample, BlendWeights<f64>)>,
}

fn fixture(d_model: usize, n_layers: usize, n_bases: usize, rank: usize, seed: u64) -> Fixture {
    let cfg = ModelConfig {
        vocab_size: 12,
        d_model,
        n_layers,
        n_heads: 2,
        d_ff: d_model * 4,
        max_seq: 10,
        precision: Precision::F64,
    };
    let mut w = TransformerWeights::<f64>::init(cfg, seed).unwrap();
    let mut rng = SplitMix64::new(seed ^ 2);
    // the residual projections init to zero, which would block every gradient
    // path through attention; give them content as a pretrained model would
    for l in w.layers.iter_mut() {
        for v in l.wo.data_mut().iter_mut().chain(l.w2.data_mut()) {
            *v = rng.next_gaussian() * 0.05;
        }
    }
    let mut pool = BaseAdapterPool::<f64>::init(&w.config, n_bases, rank, 4.0, seed ^ 1);
    // nonzero B so gradients flow to A as well
    for per_site in pool.pairs.iter_mut() {
        for pair in per_site.iter_mut() {
            for v in pair.b.data_mut() {
                *v = rng.next_gaussian() * 0.05;
            }
        }
    }
    let mut batch = Vec::new();
    for i in 0..3u32 {
        let ex = TrainExample::new(vec![i % 12, (i + 5) % 12, 11], vec![(i + 2) % 12, (i + 7) % 12]);
        let mut alphas = Vec::with_capacity(n_bases);
        for _ in 0..n_bases {
            alphas.push(0.15 + 0.7 * rng.next_f64());
        }
        batch.push((ex, BlendWeights::new(alphas, true)));
    }
    Fixture { w, pool, batch }
}

/// Mean masked NLL over the fixture batch as a pure function of the pool.
fn batch_loss(f: &Fixture, pool: &BaseAdapterPool<f64>) -> f64 {
    let mut total = 0.0;
    for (ex, bw) in &f.batch {
        let delta = combine_pool(pool, bw).unwrap();
        let logits = forward(&f.w, Some(&delta), &ex.inputs()).unwrap();
        let (targets, mask) = ex.targets_and_mask();
        total += nll_loss(&logits, &targets, &mask).unwrap();
    }
    total / f.batch.len() as f64
}

/// Analytic gradients in the same flat order as the pool tensors.
fn analytic_grads(f: &Fixture) -> Vec<Vec<f64>> {
    let pool = &f.pool;
    let n_sites = pool.sites.len();
    let mut grads: Vec<Vec<f64>> = Vec::new();
    for n in 0..pool.n_bases {
        for s in 0..n_sites {
            grads.push(vec![0.0; pool.pairs[n][s].a.data().len()]);
            grads.push(vec![0.0; pool.pairs[n][s].b.data().len()]);
        }
    }
    let inv_batch = 1.0 / f.batch.len() as f64;
    let scale_over_rank = pool.scaling / pool.rank as f64;
    for (ex, bw) in &f.batch {
        let delta = combine_pool(pool, bw).unwrap();
        let (logits, trace) = forward_traced(&f.w, Some(&delta), &ex.inputs()).unwrap();
        let (targets, mask) = ex.targets_and_mask();
        let (_, dlogits) = nll_grad(&logits, &targets, &mask).unwrap();
        let site_grads = backward(&f.w, Some(&delta), &trace, &dlogits, None).unwrap();
        for n in 0..pool.n_bases {
            let coeff = scale_over_rank * inv_batch * bw.alphas[n];
            for s in 0..n_sites {
                let g = &site_grads.g[s];
                let pair = &pool.pairs[n][s];
                let ga = g.matmul_transb(&pair.b);
                let gb = pair.a.matmul_transa(g);
                let slot = (n * n_sites + s) * 2;
                for (acc, &v) in grads[slot].iter_mut().zip(ga.data()) {
                    *acc += coeff * v;
                }
                for (acc, &v) in grads[slot + 1].iter_mut().zip(gb.data()) {
                    *acc += coeff * v;
                }
            }
        }
    }
    grads
}

fn relative_errors(f: &Fixture, eps: f64) -> Vec<f64> {
    let analytic = analytic_grads(f);
    let n_sites = f.pool.sites.len();
    let mut errors = Vec::new();
    for n in 0..f.pool.n_bases {
        for s in 0..n_sites {
            for which in 0..2 {
                let slot = (n * n_sites + s) * 2 + which;
                let len = analytic[slot].len();
                for i in 0..len {
                    let mut plus = f.pool.clone();
                    let mut minus = f.pool.clone();
                    {
                        let t = if which == 0 {
                            plus.pairs[n][s].a.data_mut()
                        } else {
                            plus.pairs[n][s].b.data_mut()
                        };
                        t[i] += eps;
                    }
                    {
                        let t = if which == 0 {
                            minus.pairs[n][s].a.data_mut()
                        } else {
                            minus.pairs[n][s].b.data_mut()
                        };
                        t[i] -= eps;
                    }
                    let fd = (batch_loss(f, &plus) - batch_loss(f, &minus)) / (2.0 * eps);
                    let an = analytic[slot][i];
                    let denom = an.abs().max(fd.abs()).max(1e-8);
                    errors.push((an - fd).abs() / denom);
                }
            }
        }
    }
    errors
}

#[test]
fn adapter_gradients_match_finite_differences_small() {
    let f = fixture(8, 1, 2, 2, 97);
    let mut errs = relative_errors(&f, 1e-5);
    errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let max = *errs.last().unwrap();
    let median = errs[errs.len() / 2];
    assert!(max < 1e-3, "max relative error {max}");
    assert!(median < 1e-5, "median relative error {median}");
}

#[test]
fn zero_alpha_adapter_gets_zero_gradient() {
    let mut f = fixture(8, 1, 3, 2, 31);
    for (_, bw) in f.batch.iter_mut() {
        bw.alphas[1] = 0.0;
    }
    let grads = analytic_grads(&f);
    let n_sites = f.pool.sites.len();
    for s in 0..n_sites {
        let slot = (n_sites + s) * 2; // adapter index 1
        assert!(grads[slot].iter().all(|&g| g == 0.0));
        assert!(grads[slot + 1].iter().all(|&g| g == 0.0));
    }
    // a neighboring adapter with nonzero alpha must receive signal
    let any_nonzero = grads[0].iter().any(|&g| g != 0.0);
    assert!(any_nonzero);
}
