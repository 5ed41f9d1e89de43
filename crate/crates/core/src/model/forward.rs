//! Forward pass, activation trace, loss, and embedding extraction.

use super::config::{Proj, SiteId};
use super::delta::{DeltaSet, SiteDelta};
use super::weights::TransformerWeights;
use super::ModelError;
use crate::numerics::Matrix;
use crate::real::Real;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Per-layer activations cached for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerTrace<T> {
    pub x_in: Matrix<T>,
    pub ln1_mean: Vec<T>,
    pub ln1_rstd: Vec<T>,
    pub x_ln1: Matrix<T>,
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
    /// Attention probabilities, one seq x seq lower-triangular matrix per head.
    pub probs: Vec<Matrix<T>>,
    pub att: Matrix<T>,
    pub x2: Matrix<T>,
    pub ln2_mean: Vec<T>,
    pub ln2_rstd: Vec<T>,
    pub x_ln2: Matrix<T>,
    pub ff1: Matrix<T>,
    pub gelu_out: Matrix<T>,
}

/// Full activation record of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    pub tokens: Vec<u32>,
    pub layers: Vec<LayerTrace<T>>,
    pub x_last: Matrix<T>,
    pub lnf_mean: Vec<T>,
    pub lnf_rstd: Vec<T>,
    pub x_final: Matrix<T>,
}

fn embed<T: Real>(w: &TransformerWeights<T>, tokens: &[u32]) -> Result<Matrix<T>, ModelError> {
    let cfg = &w.config;
    if tokens.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    if tokens.len() > cfg.max_seq {
        return Err(ModelError::SequenceTooLong {
            len: tokens.len(),
            max: cfg.max_seq,
        });
    }
    let mut x = Matrix::zeros(tokens.len(), cfg.d_model);
    for (t, &id) in tokens.iter().enumerate() {
        if id as usize >= cfg.vocab_size {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: cfg.vocab_size,
            });
        }
        let row = x.row_mut(t);
        for ((o, &e), &p) in row
            .iter_mut()
            .zip(w.tok_emb.row(id as usize).iter())
            .zip(w.pos_emb.row(t).iter())
        {
            *o = e + p;
        }
    }
    Ok(x)
}

/// Row-wise layer norm; returns (normalized, means, rstds).
pub(crate) fn layer_norm<T: Real>(x: &Matrix<T>, g: &[T], b: &[T]) -> (Matrix<T>, Vec<T>, Vec<T>) {
    let d = x.cols();
    let inv_d = T::ONE / T::from_f64(d as f64);
    let eps = T::from_f64(LN_EPS);
    let mut out = Matrix::zeros(x.rows(), d);
    let mut means = Vec::with_capacity(x.rows());
    let mut rstds = Vec::with_capacity(x.rows());
    for t in 0..x.rows() {
        let row = x.row(t);
        let mut mean = T::ZERO;
        for &v in row {
            mean += v;
        }
        mean *= inv_d;
        let mut var = T::ZERO;
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var *= inv_d;
        let rstd = T::ONE / (var + eps).sqrt();
        let orow = out.row_mut(t);
        for (i, &v) in row.iter().enumerate() {
            orow[i] = (v - mean) * rstd * g[i] + b[i];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (out, means, rstds)
}

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    half * x * (T::ONE + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (T::ONE + t) + half * x * (T::ONE - t * t) * c * (T::ONE + three * a * x * x)
}

/// Effective projection: `x * (w + delta)` with the delta applied in whatever
/// form it is stored.
fn project<T: Real>(x: &Matrix<T>, w: &Matrix<T>, delta: Option<&SiteDelta<T>>) -> Matrix<T> {
    let mut out = x.matmul(w);
    if let Some(d) = delta {
        let extra = d.apply(x);
        out.add_scaled(&extra, T::ONE);
    }
    out
}

fn run_layers<T: Real>(
    w: &TransformerWeights<T>,
    delta: Option<&DeltaSet<T>>,
    tokens: &[u32],
    collect_trace: bool,
) -> Result<(Matrix<T>, Option<ForwardTrace<T>>), ModelError> {
    let cfg = &w.config;
    let seq = tokens.len();
    let n_heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let scale = T::ONE / T::from_f64((hd as f64).sqrt());

    if let Some(d) = delta {
        if d.n_sites() != cfg.n_sites() {
            return Err(ModelError::DeltaShape {
                site: format!("delta covers {} sites, model has {}", d.n_sites(), cfg.n_sites()),
            });
        }
    }
    let mut x = embed(w, tokens)?;
    let mut layer_traces = Vec::new();

    for (l, lw) in w.layers.iter().enumerate() {
        let dq = delta.map(|d| d.site(SiteId { layer: l, proj: Proj::Q }));
        let dv = delta.map(|d| d.site(SiteId { layer: l, proj: Proj::V }));

        let (x_ln1, ln1_mean, ln1_rstd) = layer_norm(&x, &lw.ln1_g, &lw.ln1_b);
        let q = project(&x_ln1, &lw.wq, dq);
        let k = x_ln1.matmul(&lw.wk);
        let v = project(&x_ln1, &lw.wv, dv);

        // Causal attention, head by head.
        let mut att = Matrix::zeros(seq, cfg.d_model);
        let mut probs_all = Vec::with_capacity(if collect_trace { n_heads } else { 0 });
        for h in 0..n_heads {
            let off = h * hd;
            let mut probs = Matrix::zeros(seq, seq);
            for t1 in 0..seq {
                // scores over positions <= t1, softmax with max subtraction
                let qrow = &q.row(t1)[off..off + hd];
                let mut mx = T::from_f64(f64::NEG_INFINITY);
                let prow = probs.row_mut(t1);
                for (t2, p) in prow.iter_mut().enumerate().take(t1 + 1) {
                    let krow = &k.row(t2)[off..off + hd];
                    let mut s = T::ZERO;
                    for (a, b) in qrow.iter().zip(krow.iter()) {
                        s += *a * *b;
                    }
                    s *= scale;
                    *p = s;
                    mx = mx.max(s);
                }
                let mut denom = T::ZERO;
                for p in prow.iter_mut().take(t1 + 1) {
                    *p = (*p - mx).exp();
                    denom += *p;
                }
                let inv = T::ONE / denom;
                for p in prow.iter_mut().take(t1 + 1) {
                    *p *= inv;
                }
                let arow = &mut att.row_mut(t1)[off..off + hd];
                for t2 in 0..=t1 {
                    let pv = probs.get(t1, t2);
                    let vrow = &v.row(t2)[off..off + hd];
                    for (o, &vv) in arow.iter_mut().zip(vrow.iter()) {
                        *o += pv * vv;
                    }
                }
            }
            if collect_trace {
                probs_all.push(probs);
            }
        }

        let att_proj = att.matmul(&lw.wo);
        let mut x2 = x.clone();
        x2.add_scaled(&att_proj, T::ONE);

        let (x_ln2, ln2_mean, ln2_rstd) = layer_norm(&x2, &lw.ln2_g, &lw.ln2_b);
        let ff1 = x_ln2.matmul(&lw.w1);
        let mut gelu_out = ff1.clone();
        for vv in gelu_out.data_mut() {
            *vv = gelu(*vv);
        }
        let ff2 = gelu_out.matmul(&lw.w2);
        let mut x3 = x2.clone();
        x3.add_scaled(&ff2, T::ONE);

        if collect_trace {
            layer_traces.push(LayerTrace {
                x_in: std::mem::replace(&mut x, x3),
                ln1_mean,
                ln1_rstd,
                x_ln1,
                q,
                k,
                v,
                probs: probs_all,
                att,
                x2,
                ln2_mean,
                ln2_rstd,
                x_ln2,
                ff1,
                gelu_out,
            });
        } else {
            x = x3;
        }
    }

    let (x_final, lnf_mean, lnf_rstd) = layer_norm(&x, &w.lnf_g, &w.lnf_b);
    let logits = x_final.matmul_transb(&w.tok_emb);

    let trace = if collect_trace {
        Some(ForwardTrace {
            tokens: tokens.to_vec(),
            layers: layer_traces,
            x_last: x,
            lnf_mean,
            lnf_rstd,
            x_final,
        })
    } else {
        None
    };
    Ok((logits, trace))
}

/// Causal forward pass; returns `seq x vocab` logits.
pub fn forward<T: Real>(
    w: &TransformerWeights<T>,
    delta: Option<&DeltaSet<T>>,
    tokens: &[u32],
) -> Result<Matrix<T>, ModelError> {
    Ok(run_layers(w, delta, tokens, false)?.0)
}

/// Forward pass that also returns the activation trace needed by backward.
pub fn forward_traced<T: Real>(
    w: &TransformerWeights<T>,
    delta: Option<&DeltaSet<T>>,
    tokens: &[u32],
) -> Result<(Matrix<T>, ForwardTrace<T>), ModelError> {
    let (logits, trace) = run_layers(w, delta, tokens, true)?;
    Ok((logits, trace.expect("trace requested")))
}

/// First-layer query embedding: the model's actual layer-1 query vectors
/// (pre-norm then `wq`, base weights only, never adapted), mean-pooled over
/// token positions.
///
/// The pre-norm matters: it equalizes per-position scale, so the pooled
/// vector keeps the content signal instead of being dominated by whichever
/// positions grew the largest hidden norms during pretraining.
pub fn first_layer_queries<T: Real>(
    w: &TransformerWeights<T>,
    tokens: &[u32],
) -> Result<Vec<T>, ModelError> {
    let x = embed(w, tokens)?;
    let layer = &w.layers[0];
    let (x_ln1, _, _) = layer_norm(&x, &layer.ln1_g, &layer.ln1_b);
    let q = x_ln1.matmul(&layer.wq);
    let d = w.config.d_model;
    let inv = T::ONE / T::from_f64(tokens.len() as f64);
    let mut out = vec![T::ZERO; d];
    for t in 0..q.rows() {
        for (o, &v) in out.iter_mut().zip(q.row(t).iter()) {
            *o += v;
        }
    }
    for o in out.iter_mut() {
        *o *= inv;
    }
    Ok(out)
}

/// Mean negative log-likelihood over the masked positions.
///
/// `targets[t]` is the token expected at position `t + 1`; `mask[t]` selects
/// the positions that contribute to the loss.
pub fn nll_loss<T: Real>(
    logits: &Matrix<T>,
    targets: &[u32],
    mask: &[bool],
) -> Result<T, ModelError> {
    Ok(nll_loss_grad_inner(logits, targets, mask, false)?.0)
}

/// Loss plus the gradient of the mean masked NLL w.r.t. the logits.
pub fn nll_grad<T: Real>(
    logits: &Matrix<T>,
    targets: &[u32],
    mask: &[bool],
) -> Result<(T, Matrix<T>), ModelError> {
    let (loss, grad) = nll_loss_grad_inner(logits, targets, mask, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

fn nll_loss_grad_inner<T: Real>(
    logits: &Matrix<T>,
    targets: &[u32],
    mask: &[bool],
    want_grad: bool,
) -> Result<(T, Option<Matrix<T>>), ModelError> {
    if targets.len() > logits.rows() || mask.len() != targets.len() {
        return Err(ModelError::ShapeMismatch {
            context: "nll_loss targets/mask vs logits rows",
        });
    }
    let n_masked = mask.iter().filter(|&&m| m).count();
    if n_masked == 0 {
        return Err(ModelError::EmptyMask);
    }
    let vocab = logits.cols();
    let inv_n = T::ONE / T::from_f64(n_masked as f64);
    let mut loss = T::ZERO;
    let mut grad = want_grad.then(|| Matrix::zeros(logits.rows(), vocab));

    for (t, (&target, &m)) in targets.iter().zip(mask.iter()).enumerate() {
        if !m {
            continue;
        }
        if target as usize >= vocab {
            return Err(ModelError::TokenOutOfRange {
                id: target,
                vocab,
            });
        }
        let row = logits.row(t);
        let mut mx = row[0];
        for &v in row {
            mx = mx.max(v);
        }
        let mut denom = T::ZERO;
        for &v in row {
            denom += (v - mx).exp();
        }
        let log_denom = denom.ln();
        loss += (log_denom - (row[target as usize] - mx)) * inv_n;
        if let Some(g) = grad.as_mut() {
            let grow = g.row_mut(t);
            let inv_denom = T::ONE / denom;
            for (i, &v) in row.iter().enumerate() {
                grow[i] = (v - mx).exp() * inv_denom * inv_n;
            }
            grow[target as usize] -= inv_n;
        }
    }
    Ok((loss, grad))
}

/// Row-wise softmax of a logits row, numerically stabilized.
pub fn softmax_row<T: Real>(row: &[T]) -> Vec<T> {
    let mut mx = row[0];
    for &v in row {
        mx = mx.max(v);
    }
    let mut out: Vec<T> = row.iter().map(|&v| (v - mx).exp()).collect();
    let mut denom = T::ZERO;
    for &v in &out {
        denom += v;
    }
    let inv = T::ONE / denom;
    for v in out.iter_mut() {
        *v *= inv;
    }
    out
}
