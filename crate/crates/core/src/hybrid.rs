//! Device-server hybrid inference: output signatures, prototype routing,
//! threshold calibration, and the fallback path.
//!
//! A model's answer is represented by its output signature: the mean of the
//! per-step output distributions recorded during greedy decoding. Device and
//! server share the vocabulary, so signatures from both live in the same
//! space and can be compared by cosine similarity against the prototype set
//! the server shipped with the deployment package.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{greedy_decode, Decoded, DeltaSet, ModelError, TransformerWeights};
use crate::numerics::{cosine_similarity, NumericsError};
use crate::real::Real;

#[derive(Debug, Error)]
pub enum HybridError {
    #[error("decode produced zero tokens (empty generation)")]
    EmptyGeneration,
    #[error("empty score set")]
    EmptyScores,
    #[error("routing ratio {0} outside (0, 1)")]
    BadRatio(f64),
    #[error("prototype set is empty")]
    EmptyPrototypes,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SignatureSource {
    #[serde(rename = "device")]
    Device,
    #[serde(rename = "server")]
    Server,
}

/// Mean generated-token distribution over the vocabulary.
#[derive(Debug, Clone)]
pub struct OutputSignature<T> {
    pub vector: Vec<T>,
    pub source: SignatureSource,
}

impl<T: Real> OutputSignature<T> {
    /// Averages the recorded per-step distributions of a decode.
    pub fn from_decoded(decoded: &Decoded<T>, source: SignatureSource) -> Result<Self, HybridError> {
        if decoded.step_dists.is_empty() {
            return Err(HybridError::EmptyGeneration);
        }
        let vocab = decoded.step_dists[0].len();
        let inv = T::ONE / T::from_f64(decoded.step_dists.len() as f64);
        let mut vector = vec![T::ZERO; vocab];
        for dist in &decoded.step_dists {
            for (o, &p) in vector.iter_mut().zip(dist.iter()) {
                *o += p;
            }
        }
        for o in vector.iter_mut() {
            *o *= inv;
        }
        Ok(Self { vector, source })
    }
}

/// Decodes the query and condenses the result into a signature.
pub fn output_signature<T: Real>(
    w: &TransformerWeights<T>,
    delta: Option<&DeltaSet<T>>,
    query: &[u32],
    max_new: usize,
    stop_token: Option<u32>,
    source: SignatureSource,
) -> Result<(OutputSignature<T>, Decoded<T>), HybridError> {
    let decoded = greedy_decode(w, delta, query, max_new, stop_token)?;
    let sig = OutputSignature::from_decoded(&decoded, source)?;
    Ok((sig, decoded))
}

/// Server-model output signatures on the customization prompts. The server
/// model is never customized, so no delta enters here.
#[derive(Debug, Clone)]
pub struct PrototypeSet<T> {
    pub signatures: Vec<Vec<T>>,
}

impl<T: Real> PrototypeSet<T> {
    pub fn len(&self) -> usize {
        self.signatures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signatures.is_empty()
    }
}

pub fn build_prototypes<T: Real>(
    server: &TransformerWeights<T>,
    prompts: &[Vec<u32>],
    max_new: usize,
    stop_token: Option<u32>,
) -> Result<PrototypeSet<T>, HybridError> {
    if prompts.is_empty() {
        return Err(HybridError::EmptyPrototypes);
    }
    let mut signatures = Vec::with_capacity(prompts.len());
    for p in prompts {
        let (sig, _) = output_signature(server, None, p, max_new, stop_token, SignatureSource::Server)?;
        signatures.push(sig.vector);
    }
    Ok(PrototypeSet { signatures })
}

/// Mean cosine similarity of a signature against every prototype.
pub fn routing_score<T: Real>(
    o: &OutputSignature<T>,
    s: &PrototypeSet<T>,
) -> Result<f64, HybridError> {
    if s.is_empty() {
        return Err(HybridError::EmptyPrototypes);
    }
    let mut total = T::ZERO;
    for proto in &s.signatures {
        total += cosine_similarity(&o.vector, proto)?;
    }
    Ok(total.to_f64() / s.len() as f64)
}

/// Mean over generated positions of the maximum per-step probability.
pub fn max_softmax_score<T: Real>(decoded: &Decoded<T>) -> Result<f64, HybridError> {
    if decoded.step_dists.is_empty() {
        return Err(HybridError::EmptyGeneration);
    }
    let mut total = 0.0f64;
    for dist in &decoded.step_dists {
        let mut mx = T::from_f64(f64::NEG_INFINITY);
        for &p in dist {
            mx = mx.max(p);
        }
        total += mx.to_f64();
    }
    Ok(total / decoded.step_dists.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scorer {
    #[serde(rename = "prototype")]
    Prototype,
    #[serde(rename = "max-softmax")]
    MaxSoftmax,
}

impl std::str::FromStr for Scorer {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "prototype" => Ok(Self::Prototype),
            "max-softmax" | "max_softmax" => Ok(Self::MaxSoftmax),
            other => Err(format!("unknown scorer {other}")),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RoutingConfig {
    pub threshold: f64,
    pub target_ratio: f64,
    pub scorer: Scorer,
}

/// Result of calibrating a threshold on a score sample.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Calibration {
    pub threshold: f64,
    /// Number of calibration scores strictly below the threshold.
    pub routed: usize,
    /// Target count `floor(ratio * M)`.
    pub k: usize,
    /// Ties at the threshold value make the realized count fall short.
    pub tie_at_threshold: bool,
}

/// Picks the threshold so that exactly `floor(ratio * M)` calibration scores
/// fall strictly below it (barring ties at the threshold value).
pub fn calibrate_threshold(scores: &[f64], ratio: f64) -> Result<Calibration, HybridError> {
    if scores.is_empty() {
        return Err(HybridError::EmptyScores);
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(HybridError::BadRatio(ratio));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("scores must be finite"));
    let k = (ratio * scores.len() as f64).floor() as usize;
    let k = k.min(sorted.len() - 1);
    let threshold = sorted[k];
    let routed = sorted.iter().take_while(|&&s| s < threshold).count();
    Ok(Calibration {
        threshold,
        routed,
        k,
        tie_at_threshold: routed != k,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    /// Device answer kept.
    Held,
    /// Replaced by the server answer.
    Routed,
    /// Score demanded routing but no server was reachable; device answer
    /// kept and flagged.
    HeldDegraded,
}

#[derive(Debug, Clone)]
pub struct HybridOutcome {
    pub answer: Vec<u32>,
    pub decision: Decision,
    pub score: f64,
}

/// Device-first answering with server fallback.
///
/// The device decodes exactly once; the score decides whether the answer is
/// replaced by a fresh server decode (`score < threshold`).
pub fn hybrid_answer<T: Real>(
    device_weights: &TransformerWeights<T>,
    device_delta: Option<&DeltaSet<T>>,
    server_weights: Option<&TransformerWeights<T>>,
    query: &[u32],
    prototypes: &PrototypeSet<T>,
    cfg: &RoutingConfig,
    max_new: usize,
    stop_token: Option<u32>,
) -> Result<HybridOutcome, HybridError> {
    let decoded = greedy_decode(device_weights, device_delta, query, max_new, stop_token)?;
    let score = match cfg.scorer {
        Scorer::Prototype => {
            let sig = OutputSignature::from_decoded(&decoded, SignatureSource::Device)?;
            routing_score(&sig, prototypes)?
        }
        Scorer::MaxSoftmax => max_softmax_score(&decoded)?,
    };
    if score < cfg.threshold {
        match server_weights {
            Some(sw) => {
                let server_out = greedy_decode(sw, None, query, max_new, stop_token)?;
                Ok(HybridOutcome {
                    answer: server_out.tokens,
                    decision: Decision::Routed,
                    score,
                })
            }
            None => Ok(HybridOutcome {
                answer: decoded.tokens,
                decision: Decision::HeldDegraded,
                score,
            }),
        }
    } else {
        Ok(HybridOutcome {
            answer: decoded.tokens,
            decision: Decision::Held,
            score,
        })
    }
}
