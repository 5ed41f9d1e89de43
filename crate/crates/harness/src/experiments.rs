//! Experiment reproductions and their machine-readable reports.
//!
//! Every experiment is deterministic given (config, seeds) and emits a JSON
//! report plus CSV plot data; no plotting dependency.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use lorapool_core::adapters::{BaseAdapterPool, IndicatorSet};
use lorapool_core::custom::{DeviceContext, ServerContext};
use lorapool_core::hybrid::{
    calibrate_threshold, hybrid_answer, max_softmax_score, routing_score, Decision,
    OutputSignature, PrototypeSet, RoutingConfig, Scorer, SignatureSource,
};
use lorapool_core::model::{greedy_decode, ModelConfig, Precision, TransformerWeights};
use lorapool_core::real::Real;
use lorapool_core::train::{
    alpha_diversity_report, build_indicators, extract_embeddings, train_pool, DiversityReport,
    PretrainConfig, TrainConfig, TrainError, TrainLog,
};

use crate::corpus::{Corpus, CorpusCounts};
use crate::eval::{evaluate, CrossMatrix, DeviceDecoder, EvalError, ModelDecoder, Pipeline};
use crate::tasks::{default_benchmark, TaskSpec, Vocab};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("experiment {0} needs {1}")]
    MissingArtifact(&'static str, &'static str),
    #[error("unknown experiment {0}")]
    Unknown(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Hybrid(#[from] lorapool_core::hybrid::HybridError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Sizes, counts, and training recipes the default benchmark runs with.
#[derive(Debug, Clone)]
pub struct BenchmarkProfile {
    pub tasks: Vec<TaskSpec>,
    pub counts: CorpusCounts,
    pub device_model: ModelConfig,
    pub server_model: ModelConfig,
    pub device_pretrain: PretrainConfig,
    pub server_pretrain: PretrainConfig,
    pub pool_train: TrainConfig,
    pub routing_ratio: f64,
}

impl BenchmarkProfile {
    pub fn default_with_seed(seed: u64) -> Self {
        let tasks = default_benchmark(seed);
        let vocab = Vocab::new(26);
        let max_seq = tasks.iter().map(TaskSpec::max_total_len).max().unwrap_or(24);
        let device_model = ModelConfig {
            vocab_size: vocab.size(),
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_seq,
            precision: Precision::F32,
        };
        let server_model = ModelConfig {
            d_model: 128,
            n_layers: 4,
            n_heads: 8,
            d_ff: 512,
            ..device_model.clone()
        };
        Self {
            tasks,
            counts: CorpusCounts::default(),
            device_model,
            server_model,
            // stop at the onset of the learning transition so adapters
            // keep task-specific headroom
            device_pretrain: PretrainConfig {
                lr: 2e-3,
                batch_size: 16,
                max_iters: 2200,
                seed: seed ^ 0xd0,
                ..Default::default()
            },
            // trained on all tasks longer (and bigger), giving the clear
            // device-server quality gap hybrid routing exploits
            server_pretrain: PretrainConfig {
                lr: 2e-3,
                batch_size: 16,
                max_iters: 4000,
                seed: seed ^ 0x50,
                ..Default::default()
            },
            pool_train: TrainConfig {
                seed: seed ^ 0x11,
                ..TrainConfig::desk()
            },
            routing_ratio: 0.2,
        }
    }

    /// Generation budget for answers: longest answer plus slack.
    pub fn max_new(&self, corpus: &Corpus) -> usize {
        corpus.max_answer_len() + 2
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RoutingRow {
    pub scorer: String,
    pub target_ratio: f64,
    pub threshold: f64,
    pub realized_ratio: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub name: String,
    pub config_echo: serde_json::Value,
    pub per_task_accuracy: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cross_matrix: Option<CrossMatrix>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub routing: Vec<RoutingRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_stats: Option<DiversityReport>,
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl EvalReport {
    fn new(name: &str, config_echo: serde_json::Value) -> Self {
        Self {
            name: name.to_string(),
            config_echo,
            per_task_accuracy: BTreeMap::new(),
            cross_matrix: None,
            routing: Vec::new(),
            alpha_stats: None,
            extra: BTreeMap::new(),
        }
    }

    pub fn write(&self, out_dir: &Path, csv: &str) -> std::io::Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(out_dir)?;
        let json_path = out_dir.join(format!("{}.json", self.name));
        let csv_path = out_dir.join(format!("{}.csv", self.name));
        std::fs::write(&json_path, serde_json::to_string_pretty(self).expect("report json"))?;
        std::fs::write(&csv_path, csv)?;
        Ok((json_path, csv_path))
    }
}

/// Inputs an experiment may draw on. Experiments that train their own pools
/// use `pool_train`; the rest expect prebuilt artifacts.
pub struct ExperimentEnv<T: Real> {
    pub corpus: Corpus,
    pub device_base: Arc<TransformerWeights<T>>,
    pub server_weights: Option<Arc<TransformerWeights<T>>>,
    pub pool: Option<(BaseAdapterPool<T>, IndicatorSet<T>, u64)>,
    pub train_log: Option<TrainLog>,
    pub pool_train: TrainConfig,
    pub routing_ratio: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl<T: Real> ExperimentEnv<T> {
    pub fn stop_token(&self) -> u32 {
        // vocab layout fixes EOS at alphabet + 2; recover it from the model
        Vocab::new(self.device_base.config.vocab_size as u32 - crate::tasks::N_SPECIAL).eos()
    }

    pub fn max_new(&self) -> usize {
        self.corpus.max_answer_len() + 2
    }

    fn need_server(&self, name: &'static str) -> Result<Arc<TransformerWeights<T>>, ExperimentError> {
        self.server_weights
            .clone()
            .ok_or(ExperimentError::MissingArtifact(name, "server weights"))
    }

    fn need_pool(
        &self,
        name: &'static str,
    ) -> Result<&(BaseAdapterPool<T>, IndicatorSet<T>, u64), ExperimentError> {
        self.pool
            .as_ref()
            .ok_or(ExperimentError::MissingArtifact(name, "trained pool"))
    }

    /// Assembles the full pipeline around a pool.
    pub fn pipeline(
        &self,
        pool: BaseAdapterPool<T>,
        indicators: IndicatorSet<T>,
        checksum: u64,
        server_weights: Arc<TransformerWeights<T>>,
        scorer: Scorer,
        ratio: f64,
    ) -> Pipeline<T> {
        // a 300-prompt slice of the mixed calibration split keeps threshold
        // quality while bounding the per-customization decode cost
        let server = ServerContext {
            pool,
            pool_checksum: checksum,
            server_weights,
            device_base: self.device_base.clone(),
            calibration_prompts: self
                .corpus
                .calibration
                .iter()
                .take(300)
                .map(|r| r.prompt.clone())
                .collect(),
            target_ratio: ratio,
            scorer,
            decode_max_new: self.max_new(),
            stop_token: Some(self.stop_token()),
        };
        Pipeline {
            corpus: self.corpus.clone(),
            device_base: self.device_base.clone(),
            server,
            indicators,
            max_new: self.max_new(),
            stop_token: self.stop_token(),
        }
    }
}

pub const EXPERIMENT_NAMES: &[&str] = &[
    "diagonal-dominance",
    "alpha-diversity",
    "pca-ablation",
    "routing-sweep",
    "dc-size-sweep",
    "rank-sweep",
    "single-lora-baseline",
];

pub fn run_experiment<T: Real>(
    name: &str,
    env: &ExperimentEnv<T>,
) -> Result<EvalReport, ExperimentError> {
    match name {
        "diagonal-dominance" => diagonal_dominance(env),
        "alpha-diversity" => alpha_diversity(env),
        "pca-ablation" => pca_ablation(env),
        "routing-sweep" => routing_sweep(env),
        "dc-size-sweep" => dc_size_sweep(env),
        "rank-sweep" => rank_sweep(env),
        "single-lora-baseline" => single_lora_baseline(env),
        other => Err(ExperimentError::Unknown(other.to_string())),
    }
}

fn diagonal_dominance<T: Real>(env: &ExperimentEnv<T>) -> Result<EvalReport, ExperimentError> {
    let (pool, ind, checksum) = env.need_pool("diagonal-dominance")?.clone();
    let server = env.need_server("diagonal-dominance")?;
    let pipeline = env.pipeline(pool, ind, checksum, server, Scorer::Prototype, env.routing_ratio);
    let matrix = pipeline.cross_task_matrix()?;

    let mut report = EvalReport::new(
        "diagonal-dominance",
        json!({"n_bases": pipeline.server.pool.n_bases, "seed": env.seed}),
    );
    for (i, t) in matrix.tasks.iter().enumerate() {
        report.per_task_accuracy.insert(t.clone(), matrix.acc[i][i]);
    }
    let margin = matrix.diag_mean() - matrix.offdiag_mean();
    report.extra.insert("dominant_rows".into(), json!(matrix.dominant_rows()));
    report.extra.insert("n_tasks".into(), json!(matrix.tasks.len()));
    report.extra.insert("diag_mean".into(), json!(matrix.diag_mean()));
    report.extra.insert("offdiag_mean".into(), json!(matrix.offdiag_mean()));
    report.extra.insert("diag_minus_offdiag".into(), json!(margin));
    report
        .extra
        .insert("diag_dominates".into(), json!(matrix.diag_mean() > matrix.offdiag_mean()));
    let csv = matrix.to_csv();
    report.cross_matrix = Some(matrix);
    report.write(&env.out_dir, &csv)?;
    Ok(report)
}

fn diversity_csv(rep: &DiversityReport) -> String {
    let mut csv = String::from("task,adapter,mean,std\n");
    for t in &rep.tasks {
        for n in 0..rep.n_bases {
            csv.push_str(&format!(
                "{t},{n},{},{}\n",
                rep.per_task_mean[t][n], rep.per_task_std[t][n]
            ));
        }
    }
    csv
}

fn alpha_diversity<T: Real>(env: &ExperimentEnv<T>) -> Result<EvalReport, ExperimentError> {
    let log = env
        .train_log
        .as_ref()
        .ok_or(ExperimentError::MissingArtifact("alpha-diversity", "training log"))?;
    let rep = alpha_diversity_report(log)?;
    let mut report = EvalReport::new("alpha-diversity", json!({"records": rep.n_records}));
    report.extra.insert("avg_adapter_std".into(), json!(rep.avg_adapter_std));
    report
        .extra
        .insert("pairs_with_gap_0.05".into(), json!(rep.pairs_with_gap(0.05)));
    report
        .extra
        .insert("max_adapter_mean_gap".into(), json!(rep
            .adapter_mean_gap
            .iter()
            .cloned()
            .fold(0.0f64, f64::max)));
    let csv = diversity_csv(&rep);
    report.alpha_stats = Some(rep);
    report.write(&env.out_dir, &csv)?;
    Ok(report)
}

/// Trains two pools with identical budgets, PCA on and off, and compares the
/// spread of the blend weights.
fn pca_ablation<T: Real>(env: &ExperimentEnv<T>) -> Result<EvalReport, ExperimentError> {
    let examples = env.corpus.train_examples();
    let tags = env.corpus.train_tags();
    let mut report = EvalReport::new("pca-ablation", json!({"train": serde_json::to_value(&env.pool_train).unwrap()}));

    let mut stds = BTreeMap::new();
    for (label, use_pca) in [("pca_on", true), ("pca_off", false)] {
        let cfg = TrainConfig {
            use_pca,
            ..env.pool_train.clone()
        };
        let emb = extract_embeddings(&env.device_base, &examples, cfg.embedding_sample_cap, cfg.seed)?;
        let ind = build_indicators(&emb, &cfg)?;
        let (_pool, log) = train_pool(&env.device_base, &examples, Some(&tags), &ind, &cfg)?;
        let rep = alpha_diversity_report(&log)?;
        stds.insert(label.to_string(), rep.avg_adapter_std);
        report
            .extra
            .insert(format!("avg_adapter_std_{label}"), json!(rep.avg_adapter_std));
        if use_pca {
            report.alpha_stats = Some(rep);
        }
    }
    let ratio = stds["pca_on"] / stds["pca_off"].max(1e-300);
    report.extra.insert("std_ratio_on_over_off".into(), json!(ratio));
    report
        .extra
        .insert("pca_increases_spread".into(), json!(stds["pca_on"] > stds["pca_off"]));
    let csv = format!(
        "variant,avg_adapter_std\npca_on,{}\npca_off,{}\n",
        stds["pca_on"], stds["pca_off"]
    );
    report.write(&env.out_dir, &csv)?;
    Ok(report)
}

/// Outcome of one hybrid evaluation run at a fixed scorer and ratio.
#[derive(Debug, Clone, Serialize)]
pub struct HybridRun {
    pub row: RoutingRow,
    pub per_task_accuracy: BTreeMap<String, f64>,
    pub device_only_accuracy: f64,
    pub score_histogram: Vec<(f64, usize)>,
}

/// Calibrates a threshold for (scorer, ratio) on the calibration split, then
/// answers the mixed eval split device-first with server fallback.
pub fn hybrid_eval_run<T: Real>(
    device: &DeviceContext<T>,
    server_weights: Option<&TransformerWeights<T>>,
    prototypes: &PrototypeSet<T>,
    corpus: &Corpus,
    scorer: Scorer,
    ratio: f64,
    max_new: usize,
    stop_token: u32,
) -> Result<HybridRun, ExperimentError> {
    let pkg = device.current_package();
    let delta = pkg.as_ref().map(|p| &p.delta);

    let cal_records: Vec<_> = corpus.calibration.iter().take(300).collect();
    let mut cal_scores = Vec::with_capacity(cal_records.len());
    for r in cal_records {
        let decoded = greedy_decode(&device.weights, delta, &r.prompt, max_new, Some(stop_token))
            .map_err(EvalError::from)?;
        let score = match scorer {
            Scorer::Prototype => {
                let sig = OutputSignature::from_decoded(&decoded, SignatureSource::Device)?;
                routing_score(&sig, prototypes)?
            }
            Scorer::MaxSoftmax => max_softmax_score(&decoded)?,
        };
        cal_scores.push(score);
    }
    let threshold = calibrate_threshold(&cal_scores, ratio)?.threshold;
    let cfg = RoutingConfig {
        threshold,
        target_ratio: ratio,
        scorer,
    };

    let mut routed = 0usize;
    let mut correct = 0usize;
    let mut device_correct = 0usize;
    let mut per_task: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut scores = Vec::new();
    let eval_records = corpus.mixed_eval();
    for r in &eval_records {
        let outcome = hybrid_answer(
            &device.weights,
            delta,
            server_weights,
            &r.prompt,
            prototypes,
            &cfg,
            max_new,
            Some(stop_token),
        )?;
        scores.push(outcome.score);
        if outcome.decision == Decision::Routed {
            routed += 1;
        }
        let entry = per_task.entry(r.task.clone()).or_insert((0, 0));
        entry.1 += 1;
        if outcome.answer == r.answer {
            correct += 1;
            entry.0 += 1;
        }
        // device-only baseline from the same single device decode
        let device_answer = greedy_decode(&device.weights, delta, &r.prompt, max_new, Some(stop_token))
            .map_err(EvalError::from)?;
        if device_answer.tokens == r.answer {
            device_correct += 1;
        }
    }
    let n = eval_records.len().max(1);

    // 20 bins over [-1, 1] covers both scorer ranges
    let mut histogram = vec![0usize; 20];
    for &s in &scores {
        let bin = (((s + 1.0) / 2.0 * 20.0) as usize).min(19);
        histogram[bin] += 1;
    }

    Ok(HybridRun {
        row: RoutingRow {
            scorer: match scorer {
                Scorer::Prototype => "prototype".into(),
                Scorer::MaxSoftmax => "max-softmax".into(),
            },
            target_ratio: ratio,
            threshold,
            realized_ratio: routed as f64 / n as f64,
            accuracy: correct as f64 / n as f64,
        },
        per_task_accuracy: per_task
            .into_iter()
            .map(|(t, (c, tot))| (t, c as f64 / tot.max(1) as f64))
            .collect(),
        device_only_accuracy: device_correct as f64 / n as f64,
        score_histogram: histogram
            .into_iter()
            .enumerate()
            .map(|(i, c)| (-1.0 + (i as f64 + 0.5) / 10.0, c))
            .collect(),
    })
}

fn routing_sweep<T: Real>(env: &ExperimentEnv<T>) -> Result<EvalReport, ExperimentError> {
    let (pool, ind, checksum) = env.need_pool("routing-sweep")?.clone();
    let server = env.need_server("routing-sweep")?;
    let pipeline = env.pipeline(pool, ind, checksum, server.clone(), Scorer::Prototype, env.routing_ratio);
    let task = pipeline.corpus.task_ids()[0].clone();
    let (device, pkg, _) = pipeline.customize_for_task(&task, None)?;

    let mut report = EvalReport::new("routing-sweep", json!({"customized_task": task}));
    let mut csv = String::from("scorer,target_ratio,threshold,realized_ratio,accuracy\n");
    for scorer in [Scorer::Prototype, Scorer::MaxSoftmax] {
        for ratio in [0.1, 0.2, 0.3] {
            let run = hybrid_eval_run(
                &device,
                Some(&server),
                &pkg.prototypes,
                &pipeline.corpus,
                scorer,
                ratio,
                pipeline.max_new,
                pipeline.stop_token,
            )?;
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                run.row.scorer, run.row.target_ratio, run.row.threshold, run.row.realized_ratio, run.row.accuracy
            ));
            report.routing.push(run.row.clone());
            report
                .extra
                .insert("device_only_accuracy".into(), json!(run.device_only_accuracy));
        }
    }
    report.write(&env.out_dir, &csv)?;
    Ok(report)
}

fn dc_size_sweep<T: Real>(env: &ExperimentEnv<T>) -> Result<EvalReport, ExperimentError> {
    let (pool, ind, checksum) = env.need_pool("dc-size-sweep")?.clone();
    let server = env.need_server("dc-size-sweep")?;
    let pipeline = env.pipeline(pool, ind, checksum, server, Scorer::Prototype, env.routing_ratio);
    let tasks = pipeline.corpus.task_ids();
    let available = pipeline.corpus.customization[&tasks[0]].len();
    let sizes: Vec<usize> = [1usize, 2, 5, 10]
        .into_iter()
        .filter(|&s| s <= available)
        .collect();

    let mut report = EvalReport::new("dc-size-sweep", json!({"sizes": sizes}));
    let mut csv = String::from("dc_size,mean_matched_accuracy\n");
    for &size in &sizes {
        let mut total = 0.0;
        for task in &tasks {
            let (device, _, _) = pipeline.customize_for_task(task, Some(size))?;
            let decoder = DeviceDecoder {
                device: &device,
                stop_token: pipeline.stop_token,
            };
            total += evaluate(&decoder, pipeline.corpus.eval[task].iter(), pipeline.max_new)?.accuracy;
        }
        let mean = total / tasks.len() as f64;
        csv.push_str(&format!("{size},{mean}\n"));
        report.extra.insert(format!("matched_acc_dc_{size}"), json!(mean));
    }
    report.write(&env.out_dir, &csv)?;
    Ok(report)
}

fn rank_sweep<T: Real>(env: &ExperimentEnv<T>) -> Result<EvalReport, ExperimentError> {
    let server = env.need_server("rank-sweep")?;
    let examples = env.corpus.train_examples();
    let tags = env.corpus.train_tags();

    let mut report = EvalReport::new("rank-sweep", json!({"base_train": serde_json::to_value(&env.pool_train).unwrap()}));
    let mut csv = String::from("rank,mean_matched_accuracy\n");
    for rank in [1usize, 2, 4] {
        let cfg = TrainConfig {
            rank,
            scaling: rank as f64,
            ..env.pool_train.clone()
        };
        let emb = extract_embeddings(&env.device_base, &examples, cfg.embedding_sample_cap, cfg.seed)?;
        let ind = build_indicators(&emb, &cfg)?;
        let (pool, _) = train_pool(&env.device_base, &examples, Some(&tags), &ind, &cfg)?;
        let checksum = pool.checksum();
        let pipeline = env.pipeline(pool, ind, checksum, server.clone(), Scorer::Prototype, env.routing_ratio);
        let tasks = pipeline.corpus.task_ids();
        let mut total = 0.0;
        for task in &tasks {
            let (device, _, _) = pipeline.customize_for_task(task, None)?;
            let decoder = DeviceDecoder {
                device: &device,
                stop_token: pipeline.stop_token,
            };
            total += evaluate(&decoder, pipeline.corpus.eval[task].iter(), pipeline.max_new)?.accuracy;
        }
        let mean = total / tasks.len() as f64;
        csv.push_str(&format!("{rank},{mean}\n"));
        report.extra.insert(format!("matched_acc_rank_{rank}"), json!(mean));
    }
    report.write(&env.out_dir, &csv)?;
    Ok(report)
}

/// Degenerate pool: N = 1 trained with the same budget, then evaluated on
/// every task. This is the universal single-adapter baseline.
fn single_lora_baseline<T: Real>(env: &ExperimentEnv<T>) -> Result<EvalReport, ExperimentError> {
    let examples = env.corpus.train_examples();
    let tags = env.corpus.train_tags();
    let cfg = TrainConfig {
        n_bases: 1,
        ..env.pool_train.clone()
    };
    let emb = extract_embeddings(&env.device_base, &examples, cfg.embedding_sample_cap, cfg.seed)?;
    let ind = build_indicators(&emb, &cfg)?;
    let (pool, _log) = train_pool(&env.device_base, &examples, Some(&tags), &ind, &cfg)?;

    // universal use: the full adapter (blend weight 1), same for every task
    let bw = lorapool_core::adapters::BlendWeights::new(vec![T::ONE], true);
    let delta = lorapool_core::adapters::combine_pool(&pool, &bw).map_err(TrainError::from)?;

    let mut report = EvalReport::new("single-lora-baseline", json!({"n_bases": 1, "rank": cfg.rank}));
    let stop = env.stop_token();
    let decoder = ModelDecoder {
        weights: &env.device_base,
        delta: Some(&delta),
        stop_token: stop,
    };
    let mut csv = String::from("task,accuracy\n");
    let mut total = 0.0;
    for (task, records) in &env.corpus.eval {
        let res = evaluate(&decoder, records.iter(), env.max_new())?;
        csv.push_str(&format!("{task},{}\n", res.accuracy));
        report.per_task_accuracy.insert(task.clone(), res.accuracy);
        total += res.accuracy;
    }
    let mean = total / env.corpus.eval.len() as f64;
    report.extra.insert("mean_accuracy".into(), json!(mean));
    csv.push_str(&format!("mean,{mean}\n"));
    report.write(&env.out_dir, &csv)?;
    Ok(report)
}
