//! Plain next-token pretraining of the base model on the mixed corpus.

use super::optim::{cosine_lr, AdamW};
use super::{validate_corpus, BatchStream, TrainError, TrainExample};
use crate::model::{backward, forward_traced, nll_grad, BaseGrads, TransformerWeights};
use crate::numerics::Matrix;
use crate::real::Real;

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub max_iters: usize,
    pub seed: u64,
    /// Global-norm gradient clip; pretraining of tiny models is twitchy
    /// without it.
    pub grad_clip: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.99,
            batch_size: 16,
            max_iters: 2000,
            seed: 1,
            grad_clip: Some(1.0),
        }
    }
}

fn param_sizes<T: Real>(w: &TransformerWeights<T>) -> Vec<usize> {
    let mut out = vec![w.tok_emb.data().len(), w.pos_emb.data().len()];
    for l in &w.layers {
        out.extend([
            l.ln1_g.len(),
            l.ln1_b.len(),
            l.wq.data().len(),
            l.wk.data().len(),
            l.wv.data().len(),
            l.wo.data().len(),
            l.ln2_g.len(),
            l.ln2_b.len(),
            l.w1.data().len(),
            l.w2.data().len(),
        ]);
    }
    out.extend([w.lnf_g.len(), w.lnf_b.len()]);
    out
}

fn params_mut<T: Real>(w: &mut TransformerWeights<T>) -> Vec<&mut [T]> {
    let mut out: Vec<&mut [T]> = vec![w.tok_emb.data_mut(), w.pos_emb.data_mut()];
    for l in w.layers.iter_mut() {
        out.push(&mut l.ln1_g);
        out.push(&mut l.ln1_b);
        out.push(l.wq.data_mut());
        out.push(l.wk.data_mut());
        out.push(l.wv.data_mut());
        out.push(l.wo.data_mut());
        out.push(&mut l.ln2_g);
        out.push(&mut l.ln2_b);
        out.push(l.w1.data_mut());
        out.push(l.w2.data_mut());
    }
    out.push(&mut w.lnf_g);
    out.push(&mut w.lnf_b);
    out
}

fn grads_ref<T: Real>(g: &BaseGrads<T>) -> Vec<&[T]> {
    let mut out: Vec<&[T]> = vec![g.tok_emb.data(), g.pos_emb.data()];
    for l in &g.layers {
        out.push(&l.ln1_g);
        out.push(&l.ln1_b);
        out.push(l.wq.data());
        out.push(l.wk.data());
        out.push(l.wv.data());
        out.push(l.wo.data());
        out.push(&l.ln2_g);
        out.push(&l.ln2_b);
        out.push(l.w1.data());
        out.push(l.w2.data());
    }
    out.push(&g.lnf_g);
    out.push(&g.lnf_b);
    out
}

fn clip_grads<T: Real>(g: &mut BaseGrads<T>, max_norm: f64) {
    let mut sq = 0.0f64;
    for slab in grads_ref(g) {
        for v in slab {
            let x = v.to_f64();
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = T::from_f64(max_norm / norm);
        let scale_slab = |m: &mut Matrix<T>| {
            for v in m.data_mut() {
                *v *= scale;
            }
        };
        scale_slab(&mut g.tok_emb);
        scale_slab(&mut g.pos_emb);
        for l in g.layers.iter_mut() {
            for v in l
                .ln1_g
                .iter_mut()
                .chain(l.ln1_b.iter_mut())
                .chain(l.ln2_g.iter_mut())
                .chain(l.ln2_b.iter_mut())
            {
                *v *= scale;
            }
            scale_slab(&mut l.wq);
            scale_slab(&mut l.wk);
            scale_slab(&mut l.wv);
            scale_slab(&mut l.wo);
            scale_slab(&mut l.w1);
            scale_slab(&mut l.w2);
        }
        for v in g.lnf_g.iter_mut().chain(g.lnf_b.iter_mut()) {
            *v *= scale;
        }
    }
}

/// Trains every base tensor with next-token loss over all positions.
/// Returns the per-iteration mean loss curve.
pub fn pretrain<T: Real>(
    w: &mut TransformerWeights<T>,
    corpus: &[TrainExample],
    cfg: &PretrainConfig,
) -> Result<Vec<f64>, TrainError> {
    validate_corpus(corpus, w.config.max_seq)?;
    let mut opt = AdamW::<T>::new(&param_sizes(w), cfg.beta1, cfg.beta2, cfg.weight_decay);
    let mut stream = BatchStream::new(corpus.len(), cfg.seed);
    let mut losses = Vec::with_capacity(cfg.max_iters);
    let inv_batch = T::from_f64(1.0 / cfg.batch_size as f64);

    for iter in 0..cfg.max_iters {
        let batch = stream.next_batch(cfg.batch_size);
        let mut grads = BaseGrads::zeros_like(w);
        let mut loss_sum = 0.0f64;
        for &idx in &batch {
            let ex = &corpus[idx];
            let inputs = ex.inputs();
            let (targets, _) = ex.targets_and_mask();
            let mask = ex.all_positions_mask();
            let (logits, trace) = forward_traced(w, None, &inputs)?;
            let (loss, mut dlogits) = nll_grad(&logits, &targets, &mask)?;
            loss_sum += loss.to_f64();
            dlogits.scale(inv_batch);
            backward(w, None, &trace, &dlogits, Some(&mut grads))?;
        }
        let mean_loss = loss_sum / cfg.batch_size as f64;
        if !mean_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { iter });
        }
        losses.push(mean_loss);
        if let Some(max_norm) = cfg.grad_clip {
            clip_grads(&mut grads, max_norm);
        }
        let lr_t = cosine_lr(cfg.lr, iter, cfg.max_iters);
        let grefs = grads_ref(&grads);
        let mut prefs = params_mut(w);
        opt.step(lr_t, &mut prefs, &grefs);
    }
    Ok(losses)
}
