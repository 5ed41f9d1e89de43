//! Manual backward pass.
//!
//! One walk computes both gradient sinks: the per-site `dL/d(delta W)`
//! matrices the adapter chain rule needs, and (when requested) gradients for
//! every base tensor, used only by pretraining.

use super::config::SiteId;
use super::delta::DeltaSet;
use super::forward::{gelu_grad, ForwardTrace};
use super::weights::{LayerWeights, TransformerWeights};
use super::ModelError;
use crate::numerics::Matrix;
use crate::real::Real;

/// Gradient of the loss w.r.t. the effective weight of each adapted site,
/// aligned with [`super::config::ModelConfig::sites`]. Each entry is
/// `x_ln1^T * d(projection output)`, a `d_model x d_model` matrix.
#[derive(Debug, Clone)]
pub struct SiteGrads<T> {
    pub g: Vec<Matrix<T>>,
}

impl<T: Real> SiteGrads<T> {
    pub fn site(&self, site: SiteId) -> &Matrix<T> {
        &self.g[site.index()]
    }
}

/// Gradients for every base tensor; mirrors [`TransformerWeights`].
#[derive(Debug, Clone)]
pub struct BaseGrads<T> {
    pub tok_emb: Matrix<T>,
    pub pos_emb: Matrix<T>,
    pub layers: Vec<LayerGrads<T>>,
    pub lnf_g: Vec<T>,
    pub lnf_b: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct LayerGrads<T> {
    pub ln1_g: Vec<T>,
    pub ln1_b: Vec<T>,
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub ln2_g: Vec<T>,
    pub ln2_b: Vec<T>,
    pub w1: Matrix<T>,
    pub w2: Matrix<T>,
}

impl<T: Real> BaseGrads<T> {
    pub fn zeros_like(w: &TransformerWeights<T>) -> Self {
        let zl = |l: &LayerWeights<T>| LayerGrads {
            ln1_g: vec![T::ZERO; l.ln1_g.len()],
            ln1_b: vec![T::ZERO; l.ln1_b.len()],
            wq: Matrix::zeros(l.wq.rows(), l.wq.cols()),
            wk: Matrix::zeros(l.wk.rows(), l.wk.cols()),
            wv: Matrix::zeros(l.wv.rows(), l.wv.cols()),
            wo: Matrix::zeros(l.wo.rows(), l.wo.cols()),
            ln2_g: vec![T::ZERO; l.ln2_g.len()],
            ln2_b: vec![T::ZERO; l.ln2_b.len()],
            w1: Matrix::zeros(l.w1.rows(), l.w1.cols()),
            w2: Matrix::zeros(l.w2.rows(), l.w2.cols()),
        };
        Self {
            tok_emb: Matrix::zeros(w.tok_emb.rows(), w.tok_emb.cols()),
            pos_emb: Matrix::zeros(w.pos_emb.rows(), w.pos_emb.cols()),
            layers: w.layers.iter().map(zl).collect(),
            lnf_g: vec![T::ZERO; w.lnf_g.len()],
            lnf_b: vec![T::ZERO; w.lnf_b.len()],
        }
    }
}

/// Layer-norm backward. Accumulates into `dg`/`db` when provided and returns
/// the gradient w.r.t. the pre-norm input.
fn ln_backward<T: Real>(
    dy: &Matrix<T>,
    x: &Matrix<T>,
    means: &[T],
    rstds: &[T],
    g: &[T],
    mut param_grads: Option<(&mut [T], &mut [T])>,
) -> Matrix<T> {
    let d = x.cols();
    let inv_d = T::ONE / T::from_f64(d as f64);
    let mut dx = Matrix::zeros(x.rows(), d);
    for t in 0..x.rows() {
        let mean = means[t];
        let rstd = rstds[t];
        let xrow = x.row(t);
        let dyrow = dy.row(t);

        let mut mean_dxhat = T::ZERO;
        let mut mean_dxhat_xhat = T::ZERO;
        for i in 0..d {
            let xhat = (xrow[i] - mean) * rstd;
            let dxhat = dyrow[i] * g[i];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xhat;
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;

        let dxrow = dx.row_mut(t);
        for i in 0..d {
            let xhat = (xrow[i] - mean) * rstd;
            let dxhat = dyrow[i] * g[i];
            dxrow[i] = rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
        }
        if let Some((dg, db)) = param_grads.as_mut() {
            for i in 0..d {
                let xhat = (xrow[i] - mean) * rstd;
                dg[i] += dyrow[i] * xhat;
                db[i] += dyrow[i];
            }
        }
    }
    dx
}

/// Backpropagates `dlogits` through the traced forward pass.
///
/// `delta` must be the same delta set the forward pass ran with. Site
/// gradients are always produced; base gradients are accumulated into
/// `base` when provided.
pub fn backward<T: Real>(
    w: &TransformerWeights<T>,
    delta: Option<&DeltaSet<T>>,
    trace: &ForwardTrace<T>,
    dlogits: &Matrix<T>,
    mut base: Option<&mut BaseGrads<T>>,
) -> Result<SiteGrads<T>, ModelError> {
    let cfg = &w.config;
    let seq = trace.tokens.len();
    if dlogits.rows() != seq || dlogits.cols() != cfg.vocab_size {
        return Err(ModelError::ShapeMismatch {
            context: "backward dlogits shape",
        });
    }
    let n_heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let scale = T::ONE / T::from_f64((hd as f64).sqrt());

    // Output projection (tied embedding).
    let mut dx = dlogits.matmul(&w.tok_emb);
    if let Some(b) = base.as_mut() {
        let de = dlogits.matmul_transa(&trace.x_final);
        b.tok_emb.add_scaled(&de, T::ONE);
    }

    // Final layer norm.
    dx = {
        let params = base.as_mut().map(|b| (&mut b.lnf_g[..], &mut b.lnf_b[..]));
        ln_backward(&dx, &trace.x_last, &trace.lnf_mean, &trace.lnf_rstd, &w.lnf_g, params)
    };

    let mut site_grads: Vec<Matrix<T>> = (0..cfg.n_sites())
        .map(|_| Matrix::zeros(cfg.d_model, cfg.d_model))
        .collect();

    for l in (0..cfg.n_layers).rev() {
        let lw = &w.layers[l];
        let lt = &trace.layers[l];
        let dq_site = SiteId { layer: l, proj: super::config::Proj::Q };
        let dv_site = SiteId { layer: l, proj: super::config::Proj::V };

        // x3 = x2 + gelu(ln2(x2) w1) w2
        let dff2 = &dx; // gradient into the ff output
        let mut dh = dff2.matmul_transb(&lw.w2);
        if let Some(b) = base.as_mut() {
            let dw2 = lt.gelu_out.matmul_transa(dff2);
            b.layers[l].w2.add_scaled(&dw2, T::ONE);
        }
        for (dv, &pre) in dh.data_mut().iter_mut().zip(lt.ff1.data().iter()) {
            *dv *= gelu_grad(pre);
        }
        let dx_ln2 = dh.matmul_transb(&lw.w1);
        if let Some(b) = base.as_mut() {
            let dw1 = lt.x_ln2.matmul_transa(&dh);
            b.layers[l].w1.add_scaled(&dw1, T::ONE);
        }
        let dx2_from_ln = {
            let params = base.as_mut().map(|b| {
                let lay = &mut b.layers[l];
                (&mut lay.ln2_g[..], &mut lay.ln2_b[..])
            });
            ln_backward(&dx_ln2, &lt.x2, &lt.ln2_mean, &lt.ln2_rstd, &lw.ln2_g, params)
        };
        let mut dx2 = dx.clone();
        dx2.add_scaled(&dx2_from_ln, T::ONE);

        // x2 = x_in + att wo
        let datt = dx2.matmul_transb(&lw.wo);
        if let Some(b) = base.as_mut() {
            let dwo = lt.att.matmul_transa(&dx2);
            b.layers[l].wo.add_scaled(&dwo, T::ONE);
        }

        let mut dq = Matrix::zeros(seq, cfg.d_model);
        let mut dk = Matrix::zeros(seq, cfg.d_model);
        let mut dv = Matrix::zeros(seq, cfg.d_model);
        let mut dprobs_row = vec![T::ZERO; seq];
        for h in 0..n_heads {
            let off = h * hd;
            let probs = &lt.probs[h];
            for t1 in 0..seq {
                let datt_row = &datt.row(t1)[off..off + hd];
                let prow = probs.row(t1);
                // probs -> dv, and datt -> dprobs
                let mut dot_pd = T::ZERO;
                for t2 in 0..=t1 {
                    let vrow = &lt.v.row(t2)[off..off + hd];
                    let mut dp = T::ZERO;
                    for (a, b) in datt_row.iter().zip(vrow.iter()) {
                        dp += *a * *b;
                    }
                    dprobs_row[t2] = dp;
                    dot_pd += prow[t2] * dp;
                    let dvrow = &mut dv.row_mut(t2)[off..off + hd];
                    for (o, &a) in dvrow.iter_mut().zip(datt_row.iter()) {
                        *o += prow[t2] * a;
                    }
                }
                // softmax backward, then scores -> dq, dk
                for t2 in 0..=t1 {
                    let dscore = prow[t2] * (dprobs_row[t2] - dot_pd) * scale;
                    let krow = &lt.k.row(t2)[off..off + hd];
                    let qrow = &lt.q.row(t1)[off..off + hd];
                    {
                        let dqrow = &mut dq.row_mut(t1)[off..off + hd];
                        for (o, &kk) in dqrow.iter_mut().zip(krow.iter()) {
                            *o += dscore * kk;
                        }
                    }
                    {
                        let dkrow = &mut dk.row_mut(t2)[off..off + hd];
                        for (o, &qq) in dkrow.iter_mut().zip(qrow.iter()) {
                            *o += dscore * qq;
                        }
                    }
                }
            }
        }

        // Effective-weight gradients at the adapted sites.
        let gq = lt.x_ln1.matmul_transa(&dq);
        let gv = lt.x_ln1.matmul_transa(&dv);

        if let Some(b) = base.as_mut() {
            b.layers[l].wq.add_scaled(&gq, T::ONE);
            b.layers[l].wv.add_scaled(&gv, T::ONE);
            let dwk = lt.x_ln1.matmul_transa(&dk);
            b.layers[l].wk.add_scaled(&dwk, T::ONE);
        }

        // dx_ln1 = dq (wq + dq_delta)^T + dk wk^T + dv (wv + dv_delta)^T
        let mut dx_ln1 = dq.matmul_transb(&lw.wq);
        dx_ln1.add_scaled(&dk.matmul_transb(&lw.wk), T::ONE);
        dx_ln1.add_scaled(&dv.matmul_transb(&lw.wv), T::ONE);
        if let Some(ds) = delta {
            dx_ln1.add_scaled(&ds.site(dq_site).apply_transposed(&dq), T::ONE);
            dx_ln1.add_scaled(&ds.site(dv_site).apply_transposed(&dv), T::ONE);
        }

        site_grads[dq_site.index()] = gq;
        site_grads[dv_site.index()] = gv;

        let dx_from_ln1 = {
            let params = base.as_mut().map(|b| {
                let lay = &mut b.layers[l];
                (&mut lay.ln1_g[..], &mut lay.ln1_b[..])
            });
            ln_backward(&dx_ln1, &lt.x_in, &lt.ln1_mean, &lt.ln1_rstd, &lw.ln1_g, params)
        };
        dx = dx2;
        dx.add_scaled(&dx_from_ln1, T::ONE);
    }

    // Embedding gradients.
    if let Some(b) = base.as_mut() {
        for (t, &id) in trace.tokens.iter().enumerate() {
            let src = dx.row(t).to_vec();
            let erow = b.tok_emb.row_mut(id as usize);
            for (o, &v) in erow.iter_mut().zip(src.iter()) {
                *o += v;
            }
            let prow = b.pos_emb.row_mut(t);
            for (o, &v) in prow.iter_mut().zip(src.iter()) {
                *o += v;
            }
        }
    }

    Ok(SiteGrads { g: site_grads })
}
