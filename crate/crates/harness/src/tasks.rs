//! Symbolic sequence-transformation tasks.
//!
//! Every prompt is `[BOS, cue tokens, payload, SEP]` and the answer is
//! `[f(payload), EOS]`, where `f` depends on the task. The cue prefix makes
//! the task identifiable from the prompt alone; without it, tasks like copy
//! and reverse would emit identically distributed prompts and no function of
//! the prompt (embedding, adapter, or model) could tell them apart, leaving
//! the answer underdetermined.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use lorapool_core::rng::SplitMix64;

pub const N_SPECIAL: u32 = 6;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("task {0}: cue token must be a letter below the alphabet size")]
    CueOutOfRange(String),
    #[error("task {0}: empty prompt length range")]
    BadLengthRange(String),
    #[error("need at least two tasks (customization requires contrast)")]
    TooFewTasks,
    #[error("task {task}: payload space exhausted while deduplicating (alphabet {alphabet}, len {len_range:?})")]
    PayloadSpaceExhausted {
        task: String,
        alphabet: u32,
        len_range: (usize, usize),
    },
}

/// Vocabulary layout: letters `0..alphabet_size`, then six special ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub alphabet_size: u32,
}

impl Vocab {
    pub fn new(alphabet_size: u32) -> Self {
        Self { alphabet_size }
    }

    pub fn size(&self) -> usize {
        (self.alphabet_size + N_SPECIAL) as usize
    }

    pub fn bos(&self) -> u32 {
        self.alphabet_size
    }

    pub fn sep(&self) -> u32 {
        self.alphabet_size + 1
    }

    pub fn eos(&self) -> u32 {
        self.alphabet_size + 2
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Generator {
    Copy,
    Reverse,
    SortAsc,
    SortDesc,
    /// Token increment modulo the alphabet.
    Shift { k: u32 },
    /// Fixed seeded substitution over the alphabet.
    Cipher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub generator: Generator,
    pub alphabet_size: u32,
    /// Inclusive payload length range.
    pub prompt_len: (usize, usize),
    pub seed: u64,
    /// Letter tokens prefixed to every prompt of this task.
    pub cue: Vec<u32>,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), TaskError> {
        if self.cue.iter().any(|&c| c >= self.alphabet_size) {
            return Err(TaskError::CueOutOfRange(self.task_id.clone()));
        }
        if self.prompt_len.0 == 0 || self.prompt_len.0 > self.prompt_len.1 {
            return Err(TaskError::BadLengthRange(self.task_id.clone()));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.alphabet_size)
    }

    /// The task function: answer letters as a pure function of the payload.
    pub fn answer_payload(&self, payload: &[u32]) -> Vec<u32> {
        match &self.generator {
            Generator::Copy => payload.to_vec(),
            Generator::Reverse => payload.iter().rev().copied().collect(),
            Generator::SortAsc => {
                let mut v = payload.to_vec();
                v.sort_unstable();
                v
            }
            Generator::SortDesc => {
                let mut v = payload.to_vec();
                v.sort_unstable_by(|a, b| b.cmp(a));
                v
            }
            Generator::Shift { k } => payload
                .iter()
                .map(|&c| (c + k) % self.alphabet_size)
                .collect(),
            Generator::Cipher => {
                let perm = self.cipher_permutation();
                payload.iter().map(|&c| perm[c as usize]).collect()
            }
        }
    }

    /// Substitution table derived from the task seed.
    pub fn cipher_permutation(&self) -> Vec<u32> {
        let mut perm: Vec<u32> = (0..self.alphabet_size).collect();
        let mut rng = SplitMix64::derive(self.seed, 0x6369_7068); // "ciph"
        rng.shuffle(&mut perm);
        perm
    }

    /// Full prompt for a payload: `[BOS, cue..., payload..., SEP]`.
    pub fn prompt_tokens(&self, payload: &[u32]) -> Vec<u32> {
        let v = self.vocab();
        let mut out = Vec::with_capacity(2 + self.cue.len() + payload.len());
        out.push(v.bos());
        out.extend_from_slice(&self.cue);
        out.extend_from_slice(payload);
        out.push(v.sep());
        out
    }

    /// Full answer: `[f(payload)..., EOS]`.
    pub fn answer_tokens(&self, payload: &[u32]) -> Vec<u32> {
        let mut out = self.answer_payload(payload);
        out.push(self.vocab().eos());
        out
    }

    /// Longest possible full sequence (prompt plus answer).
    pub fn max_total_len(&self) -> usize {
        2 + self.cue.len() + 2 * self.prompt_len.1 + 1
    }
}

/// The default six-task benchmark over a 26-letter alphabet: copy, reverse,
/// both sorts, shift-3, and a seeded cipher, with a six-letter cue per task.
/// The cue is the desk analog of topical vocabulary density: it has to be
/// long enough that a single prompt is separable in embedding space against
/// the payload noise of 4-8 random letters, otherwise k-means clusters mix
/// tasks and the blend weights carry almost no signal. Six-letter cues wrap
/// around the alphabet, so neighboring tasks share a few cue letters - some
/// cross-task confusion is part of the benchmark, as with related subjects
/// in a question-answering corpus.
pub fn default_benchmark(seed: u64) -> Vec<TaskSpec> {
    let generators = [
        ("copy", Generator::Copy),
        ("reverse", Generator::Reverse),
        ("sort-asc", Generator::SortAsc),
        ("sort-desc", Generator::SortDesc),
        ("shift-3", Generator::Shift { k: 3 }),
        ("cipher", Generator::Cipher),
    ];
    generators
        .into_iter()
        .enumerate()
        .map(|(i, (name, generator))| TaskSpec {
            task_id: name.to_string(),
            generator,
            alphabet_size: 26,
            prompt_len: (4, 8),
            seed: seed.wrapping_add(i as u64),
            cue: (0..6).map(|j| ((6 * i + j) % 26) as u32).collect(),
        })
        .collect()
}
