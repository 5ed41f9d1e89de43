//! Corpus generation and the JSON-lines on-disk format.
//!
//! Four disjoint splits: `train` (interleaved and shuffled), `customization`
//! (per task, the user examples), `eval` (per task), and `calibration`
//! (mixed, for routing thresholds). A record's `task` field is evaluation
//! metadata only; the trainer receives label-stripped examples.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use lorapool_core::rng::SplitMix64;
use lorapool_core::train::TrainExample;

use crate::tasks::{TaskError, TaskSpec};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad corpus line {line}: {reason}")]
    BadLine { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub task: String,
    pub prompt: Vec<u32>,
    pub answer: Vec<u32>,
}

impl Record {
    pub fn to_example(&self) -> TrainExample {
        TrainExample::new(self.prompt.clone(), self.answer.clone())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CorpusCounts {
    pub train_per_task: usize,
    pub customization_per_task: usize,
    pub eval_per_task: usize,
    pub calibration_per_task: usize,
}

impl Default for CorpusCounts {
    fn default() -> Self {
        Self {
            train_per_task: 3000,
            customization_per_task: 10,
            eval_per_task: 200,
            calibration_per_task: 200,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub train: Vec<Record>,
    pub customization: BTreeMap<String, Vec<Record>>,
    pub eval: BTreeMap<String, Vec<Record>>,
    pub calibration: Vec<Record>,
}

impl Corpus {
    pub fn task_ids(&self) -> Vec<String> {
        self.eval.keys().cloned().collect()
    }

    pub fn train_examples(&self) -> Vec<TrainExample> {
        self.train.iter().map(Record::to_example).collect()
    }

    pub fn train_tags(&self) -> Vec<String> {
        self.train.iter().map(|r| r.task.clone()).collect()
    }

    /// Eval records of every task, interleaved in a stable order.
    pub fn mixed_eval(&self) -> Vec<&Record> {
        let mut out = Vec::new();
        let per_task: Vec<&Vec<Record>> = self.eval.values().collect();
        let longest = per_task.iter().map(|v| v.len()).max().unwrap_or(0);
        for i in 0..longest {
            for records in &per_task {
                if let Some(r) = records.get(i) {
                    out.push(r);
                }
            }
        }
        out
    }

    pub fn max_answer_len(&self) -> usize {
        self.train
            .iter()
            .chain(self.calibration.iter())
            .chain(self.eval.values().flatten())
            .chain(self.customization.values().flatten())
            .map(|r| r.answer.len())
            .max()
            .unwrap_or(0)
    }
}

/// Generates the full corpus: unique payloads per task (so splits stay
/// disjoint), split sequentially into train / customization / eval /
/// calibration, with the train split shuffled across tasks.
pub fn gen_corpus(
    tasks: &[TaskSpec],
    counts: &CorpusCounts,
    seed: u64,
) -> Result<Corpus, CorpusError> {
    if tasks.len() < 2 {
        return Err(TaskError::TooFewTasks.into());
    }
    for t in tasks {
        t.validate()?;
    }

    let mut corpus = Corpus::default();
    for (task_index, task) in tasks.iter().enumerate() {
        let total = counts.train_per_task
            + counts.customization_per_task
            + counts.eval_per_task
            + counts.calibration_per_task;
        let mut rng = SplitMix64::derive(seed ^ task.seed, 0x6765_6e00 | task_index as u64);
        let mut seen: BTreeSet<Vec<u32>> = BTreeSet::new();
        let mut payloads = Vec::with_capacity(total);
        let mut stale = 0usize;
        while payloads.len() < total {
            let len = task.prompt_len.0 + rng.next_index(task.prompt_len.1 - task.prompt_len.0 + 1);
            let payload: Vec<u32> = (0..len)
                .map(|_| rng.next_index(task.alphabet_size as usize) as u32)
                .collect();
            if seen.insert(payload.clone()) {
                payloads.push(payload);
                stale = 0;
            } else {
                stale += 1;
                if stale > 10_000 {
                    return Err(TaskError::PayloadSpaceExhausted {
                        task: task.task_id.clone(),
                        alphabet: task.alphabet_size,
                        len_range: task.prompt_len,
                    }
                    .into());
                }
            }
        }

        let record = |payload: &Vec<u32>| Record {
            task: task.task_id.clone(),
            prompt: task.prompt_tokens(payload),
            answer: task.answer_tokens(payload),
        };
        let mut cursor = payloads.iter();
        corpus
            .train
            .extend(cursor.by_ref().take(counts.train_per_task).map(record));
        corpus.customization.insert(
            task.task_id.clone(),
            cursor
                .by_ref()
                .take(counts.customization_per_task)
                .map(record)
                .collect(),
        );
        corpus.eval.insert(
            task.task_id.clone(),
            cursor.by_ref().take(counts.eval_per_task).map(record).collect(),
        );
        corpus
            .calibration
            .extend(cursor.by_ref().take(counts.calibration_per_task).map(record));
    }

    let mut shuffle_rng = SplitMix64::derive(seed, 0x7368_7566); // "shuf"
    shuffle_rng.shuffle(&mut corpus.train);
    shuffle_rng.shuffle(&mut corpus.calibration);
    Ok(corpus)
}

fn write_jsonl(path: &Path, records: impl Iterator<Item = Record>) -> Result<(), CorpusError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        writeln!(f, "{}", serde_json::to_string(&r).expect("record json"))?;
    }
    Ok(())
}

fn read_jsonl(path: &Path) -> Result<Vec<Record>, CorpusError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CorpusError::BadLine {
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<(), CorpusError> {
    std::fs::create_dir_all(dir)?;
    write_jsonl(&dir.join("train.jsonl"), corpus.train.iter().cloned())?;
    write_jsonl(
        &dir.join("customization.jsonl"),
        corpus.customization.values().flatten().cloned(),
    )?;
    write_jsonl(&dir.join("eval.jsonl"), corpus.eval.values().flatten().cloned())?;
    write_jsonl(&dir.join("calibration.jsonl"), corpus.calibration.iter().cloned())?;
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus, CorpusError> {
    let group = |records: Vec<Record>| {
        let mut map: BTreeMap<String, Vec<Record>> = BTreeMap::new();
        for r in records {
            map.entry(r.task.clone()).or_default().push(r);
        }
        map
    };
    Ok(Corpus {
        train: read_jsonl(&dir.join("train.jsonl"))?,
        customization: group(read_jsonl(&dir.join("customization.jsonl"))?),
        eval: group(read_jsonl(&dir.join("eval.jsonl"))?),
        calibration: read_jsonl(&dir.join("calibration.jsonl"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::default_benchmark;

    fn small_counts() -> CorpusCounts {
        CorpusCounts {
            train_per_task: 20,
            customization_per_task: 3,
            eval_per_task: 5,
            calibration_per_task: 4,
        }
    }

    #[test]
    fn split_sizes_match_requested_counts() {
        let tasks = default_benchmark(3);
        let c = gen_corpus(&tasks, &small_counts(), 9).unwrap();
        assert_eq!(c.train.len(), 6 * 20);
        assert_eq!(c.calibration.len(), 6 * 4);
        for t in c.task_ids() {
            assert_eq!(c.customization[&t].len(), 3);
            assert_eq!(c.eval[&t].len(), 5);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let tasks = default_benchmark(3);
        let a = gen_corpus(&tasks, &small_counts(), 9).unwrap();
        let b = gen_corpus(&tasks, &small_counts(), 9).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.calibration, b.calibration);
        assert_eq!(a.eval, b.eval);
    }

    #[test]
    fn splits_are_disjoint() {
        let tasks = default_benchmark(4);
        let c = gen_corpus(&tasks, &small_counts(), 10).unwrap();
        let mut all: BTreeSet<Vec<u32>> = BTreeSet::new();
        let mut count = 0;
        for r in c
            .train
            .iter()
            .chain(c.calibration.iter())
            .chain(c.eval.values().flatten())
            .chain(c.customization.values().flatten())
        {
            all.insert(r.prompt.clone());
            count += 1;
        }
        assert_eq!(all.len(), count, "duplicate prompt across splits");
    }

    #[test]
    fn answers_verified_by_independent_generator_oracle() {
        let tasks = default_benchmark(5);
        let c = gen_corpus(&tasks, &small_counts(), 11).unwrap();
        for r in c.train.iter().take(60) {
            let task = tasks.iter().find(|t| t.task_id == r.task).unwrap();
            // strip [BOS, cue ...] prefix and [SEP] suffix to recover payload
            let payload = &r.prompt[1 + task.cue.len()..r.prompt.len() - 1];
            assert_eq!(r.answer, task.answer_tokens(payload));
        }
    }

    #[test]
    fn file_round_trip_byte_identical() {
        let tasks = default_benchmark(6);
        let c = gen_corpus(&tasks, &small_counts(), 12).unwrap();
        let dir = std::env::temp_dir().join(format!("corpus_rt_{}", std::process::id()));
        save_corpus(&c, &dir).unwrap();
        let first = std::fs::read(dir.join("train.jsonl")).unwrap();
        save_corpus(&c, &dir).unwrap();
        let second = std::fs::read(dir.join("train.jsonl")).unwrap();
        assert_eq!(first, second);
        let back = load_corpus(&dir).unwrap();
        assert_eq!(back.train, c.train);
        assert_eq!(back.eval, c.eval);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn one_task_is_rejected() {
        let tasks = vec![default_benchmark(1).remove(0)];
        assert!(gen_corpus(&tasks, &small_counts(), 1).is_err());
    }
}
