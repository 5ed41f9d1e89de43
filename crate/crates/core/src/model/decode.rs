//! Greedy decoding.

use super::delta::DeltaSet;
use super::forward::{forward, softmax_row};
use super::weights::TransformerWeights;
use super::ModelError;
use crate::real::Real;

/// Greedy decode result: generated tokens plus the full output distribution
/// at each generated position.
#[derive(Debug, Clone)]
pub struct Decoded<T> {
    pub tokens: Vec<u32>,
    pub step_dists: Vec<Vec<T>>,
}

/// Argmax decoding, ties broken by lowest token id.
///
/// Generation stops after `max_new` tokens, on emitting `stop_token`, or when
/// the context window is full. The stop token, when emitted, is included in
/// the output along with its distribution.
pub fn greedy_decode<T: Real>(
    w: &TransformerWeights<T>,
    delta: Option<&DeltaSet<T>>,
    prompt: &[u32],
    max_new: usize,
    stop_token: Option<u32>,
) -> Result<Decoded<T>, ModelError> {
    if prompt.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    if prompt.len() > w.config.max_seq {
        return Err(ModelError::SequenceTooLong {
            len: prompt.len(),
            max: w.config.max_seq,
        });
    }
    let mut seq = prompt.to_vec();
    let mut out = Decoded {
        tokens: Vec::new(),
        step_dists: Vec::new(),
    };
    for _ in 0..max_new {
        if seq.len() >= w.config.max_seq {
            break;
        }
        let logits = forward(w, delta, &seq)?;
        let dist = softmax_row(logits.row(logits.rows() - 1));
        let mut best = 0usize;
        for (i, &p) in dist.iter().enumerate() {
            if p > dist[best] {
                best = i;
            }
        }
        out.step_dists.push(dist);
        out.tokens.push(best as u32);
        seq.push(best as u32);
        if stop_token == Some(best as u32) {
            break;
        }
    }
    Ok(out)
}
