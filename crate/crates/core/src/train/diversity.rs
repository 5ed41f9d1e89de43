//! Blend-weight diversity statistics from a training log.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::pool::TrainLog;
use super::TrainError;

/// Per-(task, adapter) blend-weight statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiversityReport {
    pub tasks: Vec<String>,
    pub n_bases: usize,
    /// `mean[task][adapter]`
    pub per_task_mean: BTreeMap<String, Vec<f64>>,
    /// `std[task][adapter]` (population standard deviation)
    pub per_task_std: BTreeMap<String, Vec<f64>>,
    /// Per adapter: largest gap between any two per-task means.
    pub adapter_mean_gap: Vec<f64>,
    /// Std of each adapter's weights over all records, averaged over adapters.
    pub avg_adapter_std: f64,
    pub n_records: usize,
}

impl DiversityReport {
    /// Number of (task, adapter) pairs whose mean differs from another task's
    /// mean on the same adapter by at least `gap`.
    pub fn pairs_with_gap(&self, gap: f64) -> usize {
        let mut count = 0;
        for n in 0..self.n_bases {
            for t in &self.tasks {
                let mine = self.per_task_mean[t][n];
                let differs = self
                    .tasks
                    .iter()
                    .any(|other| (self.per_task_mean[other][n] - mine).abs() >= gap);
                if differs {
                    count += 1;
                }
            }
        }
        count
    }
}

/// Summarizes the per-task blend-weight distributions recorded during pool
/// training. Requires task tags in the log.
pub fn alpha_diversity_report(log: &TrainLog) -> Result<DiversityReport, TrainError> {
    let tagged: Vec<_> = log
        .alpha_records
        .iter()
        .filter(|r| r.task.is_some() && !r.alphas.is_empty())
        .collect();
    if tagged.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let n_bases = tagged[0].alphas.len();

    let mut by_task: BTreeMap<String, Vec<&Vec<f64>>> = BTreeMap::new();
    for r in &tagged {
        by_task
            .entry(r.task.clone().unwrap())
            .or_default()
            .push(&r.alphas);
    }

    let stats = |rows: &[&Vec<f64>]| -> (Vec<f64>, Vec<f64>) {
        let inv = 1.0 / rows.len() as f64;
        let mut mean = vec![0.0; n_bases];
        for row in rows {
            for (m, &v) in mean.iter_mut().zip(row.iter()) {
                *m += v * inv;
            }
        }
        let mut var = vec![0.0; n_bases];
        for row in rows {
            for ((s, &v), &m) in var.iter_mut().zip(row.iter()).zip(mean.iter()) {
                let d = v - m;
                *s += d * d * inv;
            }
        }
        (mean, var.into_iter().map(f64::sqrt).collect())
    };

    let mut per_task_mean = BTreeMap::new();
    let mut per_task_std = BTreeMap::new();
    for (task, rows) in &by_task {
        let (mean, std) = stats(rows);
        per_task_mean.insert(task.clone(), mean);
        per_task_std.insert(task.clone(), std);
    }

    let tasks: Vec<String> = by_task.keys().cloned().collect();
    let mut adapter_mean_gap = vec![0.0; n_bases];
    for (n, gap) in adapter_mean_gap.iter_mut().enumerate() {
        let means: Vec<f64> = tasks.iter().map(|t| per_task_mean[t][n]).collect();
        let hi = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = means.iter().cloned().fold(f64::INFINITY, f64::min);
        *gap = hi - lo;
    }

    let all_rows: Vec<&Vec<f64>> = tagged.iter().map(|r| &r.alphas).collect();
    let (_, overall_std) = stats(&all_rows);
    let avg_adapter_std = overall_std.iter().sum::<f64>() / n_bases as f64;

    Ok(DiversityReport {
        tasks,
        n_bases,
        per_task_mean,
        per_task_std,
        adapter_mean_gap,
        avg_adapter_std,
        n_records: tagged.len(),
    })
}
