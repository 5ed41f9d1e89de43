//! Training: base-model pretraining and joint adapter-pool training.

mod diversity;
mod optim;
mod pool;
mod pretrain;

pub use diversity::{alpha_diversity_report, DiversityReport};
pub use optim::{cosine_lr, optimizer_steps, AdamW, OPTIMIZER_STEPS};
pub use pool::{
    build_indicators, extract_embeddings, train_pool, AlphaRecord, TrainConfig, TrainLog,
};
pub use pretrain::{pretrain, PretrainConfig};

use thiserror::Error;

use crate::rng::SplitMix64;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("training example {index} invalid: {reason}")]
    BadExample { index: usize, reason: String },
    #[error("non-finite loss at iteration {iter}; aborting (lr too high or corrupt data)")]
    NonFiniteLoss { iter: usize },
    #[error("indicator set has {indicator} bases but config wants {config}")]
    IndicatorPoolMismatch { indicator: usize, config: usize },
    #[error("base weights changed during adapter training (checksum {before:016x} -> {after:016x})")]
    FrozenBaseViolated { before: u64, after: u64 },
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Adapter(#[from] crate::adapters::AdapterError),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
}

/// A label-stripped training record: the trainer sees prompt and answer
/// tokens and nothing else. Task tags travel on a separate side channel that
/// only feeds the diagnostics log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainExample {
    pub prompt: Vec<u32>,
    pub answer: Vec<u32>,
}

impl TrainExample {
    pub fn new(prompt: Vec<u32>, answer: Vec<u32>) -> Self {
        Self { prompt, answer }
    }

    pub fn total_len(&self) -> usize {
        self.prompt.len() + self.answer.len()
    }

    /// Model input: everything except the final token (which is only ever a
    /// prediction target).
    pub fn inputs(&self) -> Vec<u32> {
        let mut t = self.full_tokens();
        t.pop();
        t
    }

    pub fn full_tokens(&self) -> Vec<u32> {
        let mut t = Vec::with_capacity(self.total_len());
        t.extend_from_slice(&self.prompt);
        t.extend_from_slice(&self.answer);
        t
    }

    /// Next-token targets aligned with [`Self::inputs`], plus the answer-only
    /// loss mask (position t is masked in iff token t+1 is an answer token).
    pub fn targets_and_mask(&self) -> (Vec<u32>, Vec<bool>) {
        let tokens = self.full_tokens();
        let targets: Vec<u32> = tokens[1..].to_vec();
        let mask: Vec<bool> = (0..targets.len()).map(|t| t + 1 >= self.prompt.len()).collect();
        (targets, mask)
    }

    /// Mask covering every position: plain language-model training.
    pub fn all_positions_mask(&self) -> Vec<bool> {
        vec![true; self.total_len() - 1]
    }

    fn validate(&self, index: usize, max_seq: usize) -> Result<(), TrainError> {
        if self.prompt.is_empty() || self.answer.is_empty() {
            return Err(TrainError::BadExample {
                index,
                reason: "prompt and answer must be nonempty".into(),
            });
        }
        if self.total_len() > max_seq {
            return Err(TrainError::BadExample {
                index,
                reason: format!("length {} exceeds max_seq {max_seq}", self.total_len()),
            });
        }
        Ok(())
    }
}

pub(crate) fn validate_corpus(corpus: &[TrainExample], max_seq: usize) -> Result<(), TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    for (i, ex) in corpus.iter().enumerate() {
        ex.validate(i, max_seq)?;
    }
    Ok(())
}

/// Deterministic epoch-shuffled index stream for mini-batch sampling.
pub(crate) struct BatchStream {
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    seed: u64,
}

impl BatchStream {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            cursor: 0,
            epoch: 0,
            seed,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        let mut rng = SplitMix64::derive(self.seed, 0x6261_7463_68 ^ self.epoch); // "batch"
        for i in 0..self.order.len() {
            self.order[i] = i;
        }
        rng.shuffle(&mut self.order);
        self.cursor = 0;
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn targets_shift_and_mask_answers_only() {
        let ex = TrainExample::new(vec![10, 11, 12], vec![20, 21]);
        assert_eq!(ex.inputs(), vec![10, 11, 12, 20]);
        let (targets, mask) = ex.targets_and_mask();
        assert_eq!(targets, vec![11, 12, 20, 21]);
        assert_eq!(mask, vec![false, false, true, true]);
    }

    #[test]
    fn batch_stream_covers_epoch_before_repeating() {
        let mut bs = BatchStream::new(6, 1);
        let first_epoch = bs.next_batch(6);
        let mut sorted = first_epoch.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn batch_stream_deterministic() {
        let mut a = BatchStream::new(10, 3);
        let mut b = BatchStream::new(10, 3);
        assert_eq!(a.next_batch(25), b.next_batch(25));
    }
}
