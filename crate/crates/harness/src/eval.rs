//! Exact-match evaluation and the cross-customization accuracy matrix.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use lorapool_core::adapters::IndicatorSet;
use lorapool_core::custom::{
    CustomizationRequest, CustomizationSet, DeploymentPackage, DeviceContext, ProtocolError,
    ServerContext,
};
use lorapool_core::model::{greedy_decode, DeltaSet, ModelError, TransformerWeights};
use lorapool_core::real::Real;

use crate::corpus::{Corpus, Record};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty evaluation set")]
    EmptySet,
    #[error("task {0} missing from corpus")]
    UnknownTask(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Anything that can answer a prompt with a token sequence.
pub trait AnswerDecoder {
    fn answer(&self, prompt: &[u32], max_new: usize) -> Vec<u32>;
}

/// Plain model handle (base weights plus optional adapter delta).
pub struct ModelDecoder<'a, T> {
    pub weights: &'a TransformerWeights<T>,
    pub delta: Option<&'a DeltaSet<T>>,
    pub stop_token: u32,
}

impl<T: Real> AnswerDecoder for ModelDecoder<'_, T> {
    fn answer(&self, prompt: &[u32], max_new: usize) -> Vec<u32> {
        greedy_decode(self.weights, self.delta, prompt, max_new, Some(self.stop_token))
            .map(|d| d.tokens)
            .unwrap_or_default()
    }
}

/// Device handle with whatever package is currently applied.
pub struct DeviceDecoder<'a, T> {
    pub device: &'a DeviceContext<T>,
    pub stop_token: u32,
}

impl<T: Real> AnswerDecoder for DeviceDecoder<'_, T> {
    fn answer(&self, prompt: &[u32], max_new: usize) -> Vec<u32> {
        self.device
            .decode(prompt, max_new, Some(self.stop_token))
            .map(|d| d.tokens)
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub correct: usize,
    pub n: usize,
}

/// Greedy decode per prompt, exact match of the full answer token sequence.
pub fn evaluate<'r>(
    decoder: &impl AnswerDecoder,
    records: impl IntoIterator<Item = &'r Record>,
    max_new: usize,
) -> Result<EvalResult, EvalError> {
    let mut n = 0usize;
    let mut correct = 0usize;
    for r in records {
        let got = decoder.answer(&r.prompt, max_new);
        if got == r.answer {
            correct += 1;
        }
        n += 1;
    }
    if n == 0 {
        return Err(EvalError::EmptySet);
    }
    Ok(EvalResult {
        accuracy: correct as f64 / n as f64,
        correct,
        n,
    })
}

/// Cross-customization accuracy matrix: `acc[i][j]` is the accuracy on eval
/// task `i` of the device customized from task `j`'s customization set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossMatrix {
    pub tasks: Vec<String>,
    pub acc: Vec<Vec<f64>>,
    /// Blend weights each column's request carried.
    pub alphas: BTreeMap<String, Vec<f64>>,
}

impl CrossMatrix {
    pub fn diag_mean(&self) -> f64 {
        let k = self.tasks.len();
        (0..k).map(|i| self.acc[i][i]).sum::<f64>() / k as f64
    }

    pub fn offdiag_mean(&self) -> f64 {
        let k = self.tasks.len();
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    total += self.acc[i][j];
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    /// Rows whose diagonal entry is >= every off-diagonal entry in the row.
    pub fn dominant_rows(&self) -> usize {
        let k = self.tasks.len();
        (0..k)
            .filter(|&i| (0..k).all(|j| self.acc[i][i] >= self.acc[i][j]))
            .count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("eval_task");
        for t in &self.tasks {
            out.push_str(&format!(",custom_{t}"));
        }
        out.push('\n');
        for (i, t) in self.tasks.iter().enumerate() {
            out.push_str(t);
            for v in &self.acc[i] {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Everything needed to run the full customization path end to end.
pub struct Pipeline<T> {
    pub corpus: Corpus,
    pub device_base: Arc<TransformerWeights<T>>,
    pub server: ServerContext<T>,
    pub indicators: IndicatorSet<T>,
    pub max_new: usize,
    pub stop_token: u32,
}

impl<T: Real> Pipeline<T> {
    pub fn fresh_device(&self) -> DeviceContext<T> {
        DeviceContext::new(
            self.device_base.clone(),
            self.indicators.clone(),
            self.server.pool_checksum,
            true,
        )
    }

    /// Runs the wire protocol for one task: device computes the request from
    /// its customization split, the server blends and calibrates, the device
    /// applies the package. Messages pass through their serialized forms.
    pub fn customize_for_task(
        &self,
        task: &str,
        dc_size: Option<usize>,
    ) -> Result<(DeviceContext<T>, DeploymentPackage<T>, CustomizationRequest), EvalError> {
        let records = self
            .corpus
            .customization
            .get(task)
            .ok_or_else(|| EvalError::UnknownTask(task.to_string()))?;
        let take = dc_size.unwrap_or(records.len()).min(records.len());
        let dc = CustomizationSet::new(
            records
                .iter()
                .take(take)
                .map(|r| (r.prompt.clone(), r.answer.clone()))
                .collect(),
        )?;

        let device = self.fresh_device();
        let req = device.make_request(&dc)?;
        let req_wire = CustomizationRequest::from_bytes(&req.to_bytes())?;
        let pkg = self.server.serve_blend(&req_wire, &dc.prompts())?;
        let pkg_wire = DeploymentPackage::from_bytes(&pkg.to_bytes())?;
        device.apply_package(&pkg_wire)?;
        Ok((device, pkg, req))
    }

    /// Accuracy of the given decoder per task on the eval split.
    pub fn per_task_accuracy(
        &self,
        decoder: &impl AnswerDecoder,
    ) -> Result<BTreeMap<String, f64>, EvalError> {
        let mut out = BTreeMap::new();
        for (task, records) in &self.corpus.eval {
            let res = evaluate(decoder, records.iter(), self.max_new)?;
            out.insert(task.clone(), res.accuracy);
        }
        Ok(out)
    }

    pub fn cross_task_matrix(&self) -> Result<CrossMatrix, EvalError> {
        let tasks = self.corpus.task_ids();
        let k = tasks.len();
        let mut acc = vec![vec![0.0; k]; k];
        let mut alphas = BTreeMap::new();
        for (j, custom_task) in tasks.iter().enumerate() {
            let (device, _, req) = self.customize_for_task(custom_task, None)?;
            alphas.insert(custom_task.clone(), req.alphas.clone());
            let decoder = DeviceDecoder {
                device: &device,
                stop_token: self.stop_token,
            };
            for (i, eval_task) in tasks.iter().enumerate() {
                let res = evaluate(&decoder, self.corpus.eval[eval_task].iter(), self.max_new)?;
                acc[i][j] = res.accuracy;
            }
        }
        Ok(CrossMatrix { tasks, acc, alphas })
    }
}
