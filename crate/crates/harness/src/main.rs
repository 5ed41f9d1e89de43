//! Command-line entry point for the full pipeline: data generation, base
//! pretraining, pool training, customization, evaluation, and experiments.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use lorapool_core::adapters::{load_pool, save_pool};
use lorapool_core::custom::{DeploymentPackage, DeviceContext, ServerContext};
use lorapool_core::hybrid::{calibrate_threshold, Scorer};
use lorapool_core::model::{ModelConfig, TransformerWeights};
use lorapool_core::real::Real;
use lorapool_core::train::{
    build_indicators, extract_embeddings, pretrain, train_pool, TrainConfig,
    TrainLog,
};

use lorapool_harness::corpus::{gen_corpus, load_corpus, save_corpus, CorpusCounts};
use lorapool_harness::eval::{evaluate, ModelDecoder};
use lorapool_harness::experiments::{
    hybrid_eval_run, run_experiment, BenchmarkProfile, EvalReport, ExperimentEnv,
    EXPERIMENT_NAMES,
};
use lorapool_harness::tasks::{default_benchmark, Vocab, N_SPECIAL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Parser)]
#[command(name = "lorapool", about = "Adapter-pool training, blending, and hybrid inference")]
struct Cli {
    /// Global seed driving every random draw.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Numeric precision of models and training.
    #[arg(long, global = true, value_enum, default_value_t = PrecisionArg::F32)]
    precision: PrecisionArg,
    /// Single-threaded bit-reproducible mode. Execution is always
    /// deterministic in this build; the flag is accepted for compatibility.
    #[arg(long, global = true, default_value_t = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark corpus.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3000)]
        train_per_task: usize,
        #[arg(long, default_value_t = 10)]
        dc: usize,
        #[arg(long, default_value_t = 200)]
        eval: usize,
        #[arg(long, default_value_t = 200)]
        calib: usize,
    },
    /// Pretrain a base model (plain next-token loss on the mixed corpus).
    PretrainBase {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// device: d64/2 layers; server: d128/4 layers, trained longer.
        #[arg(long, default_value = "device")]
        profile: String,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Jointly train the adapter pool over a frozen base model.
    TrainPool {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long, default_value_t = 8)]
        n_bases: usize,
        #[arg(long, default_value_t = 4)]
        rank: usize,
        #[arg(long, default_value_t = 4.0)]
        scaling: f64,
        #[arg(long, default_value_t = 16)]
        pca_dim: usize,
        #[arg(long, default_value_t = 400)]
        iters: usize,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// TrainLog destination (JSON lines).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Cluster raw embeddings instead of PCA-reduced ones.
        #[arg(long, default_value_t = false)]
        no_pca: bool,
        /// Keep raw cosines instead of mapping through (c+1)/2.
        #[arg(long, default_value_t = false)]
        raw_alphas: bool,
    },
    /// Run the device-server customization session for one task.
    Customize {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        server: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        ratio: f64,
        #[arg(long, default_value = "prototype")]
        scorer: String,
        #[arg(long)]
        dc_size: Option<usize>,
    },
    /// Exact-match accuracy of a model (optionally with a deployed package).
    Eval {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        pkg: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "eval")]
        split: String,
        #[arg(long)]
        task: Option<String>,
    },
    /// Full cross-customization accuracy matrix.
    CrossMatrix {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        server: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pick a routing threshold from a file of scores (one per line).
    Calibrate {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        ratio: f64,
    },
    /// Hybrid device/server evaluation of a deployed package.
    HybridEval {
        #[arg(long)]
        device_pkg: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        server: PathBuf,
        /// Corpus directory holding the eval and calibration splits.
        #[arg(long = "eval", alias = "data")]
        data: PathBuf,
        #[arg(long, default_value = "prototype")]
        scorer: String,
        #[arg(long, default_value_t = 0.2)]
        ratio: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a named experiment (see --list).
    Experiment {
        name: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        server: Option<PathBuf>,
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Iteration budget for experiments that train their own pools.
        #[arg(long)]
        iters: Option<usize>,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.precision {
        PrecisionArg::F32 => run::<f32>(cli),
        PrecisionArg::F64 => run::<f64>(cli),
    }
}

fn stop_token_of(config: &ModelConfig) -> u32 {
    Vocab::new(config.vocab_size as u32 - N_SPECIAL).eos()
}

fn load_base<T: Real>(path: &Path) -> Result<TransformerWeights<T>> {
    TransformerWeights::<T>::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn server_context<T: Real>(
    pool_path: &Path,
    base: Arc<TransformerWeights<T>>,
    server_path: &Path,
    data: &Path,
    ratio: f64,
    scorer: Scorer,
) -> Result<(ServerContext<T>, lorapool_core::adapters::IndicatorSet<T>)> {
    let (pool, indicators, checksum) = load_pool::<T>(pool_path)
        .with_context(|| format!("loading pool {}", pool_path.display()))?;
    let server_weights = Arc::new(load_base::<T>(server_path)?);
    let corpus = load_corpus(data)?;
    let max_new = corpus.max_answer_len() + 2;
    let stop = stop_token_of(&base.config);
    Ok((
        ServerContext {
            pool,
            pool_checksum: checksum,
            server_weights,
            device_base: base,
            calibration_prompts: corpus.calibration.iter().map(|r| r.prompt.clone()).collect(),
            target_ratio: ratio,
            scorer,
            decode_max_new: max_new,
            stop_token: Some(stop),
        },
        indicators,
    ))
}

fn run<T: Real>(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::GenData {
            out,
            train_per_task,
            dc,
            eval,
            calib,
        } => {
            let tasks = default_benchmark(seed);
            let counts = CorpusCounts {
                train_per_task,
                customization_per_task: dc,
                eval_per_task: eval,
                calibration_per_task: calib,
            };
            let corpus = gen_corpus(&tasks, &counts, seed)?;
            save_corpus(&corpus, &out)?;
            println!(
                "wrote {} train, {} eval records across {} tasks to {}",
                corpus.train.len(),
                corpus.eval.values().map(Vec::len).sum::<usize>(),
                corpus.eval.len(),
                out.display()
            );
        }

        Command::PretrainBase {
            data,
            out,
            profile,
            iters,
            lr,
            batch,
        } => {
            let corpus = load_corpus(&data)?;
            let bench = BenchmarkProfile::default_with_seed(seed);
            let (model_cfg, mut pre_cfg) = match profile.as_str() {
                "device" => (bench.device_model, bench.device_pretrain),
                "server" => (bench.server_model, bench.server_pretrain),
                other => bail!("unknown profile {other} (expected device or server)"),
            };
            if let Some(v) = iters {
                pre_cfg.max_iters = v;
            }
            if let Some(v) = lr {
                pre_cfg.lr = v;
            }
            if let Some(v) = batch {
                pre_cfg.batch_size = v;
            }
            pre_cfg.seed = seed ^ pre_cfg.seed;
            let mut w = TransformerWeights::<T>::init(model_cfg, seed)?;
            let losses = pretrain(&mut w, &corpus.train_examples(), &pre_cfg)?;
            w.save(&out)?;
            println!(
                "pretrained {profile} model: {} iters, loss {:.4} -> {:.4}, saved to {}",
                losses.len(),
                losses.first().unwrap_or(&f64::NAN),
                losses.last().unwrap_or(&f64::NAN),
                out.display()
            );
        }

        Command::TrainPool {
            corpus,
            base,
            n_bases,
            rank,
            scaling,
            pca_dim,
            iters,
            lr,
            batch,
            out,
            log,
            no_pca,
            raw_alphas,
        } => {
            let data = load_corpus(&corpus)?;
            let w = load_base::<T>(&base)?;
            let mut cfg = TrainConfig {
                n_bases,
                rank,
                scaling,
                pca_dim,
                max_iters: iters,
                seed,
                use_pca: !no_pca,
                normalize_alphas: !raw_alphas,
                ..TrainConfig::desk()
            };
            if let Some(v) = lr {
                cfg.lr = v;
            }
            if let Some(v) = batch {
                cfg.batch_size = v;
            }
            let examples = data.train_examples();
            let tags = data.train_tags();
            let emb = extract_embeddings(&w, &examples, cfg.embedding_sample_cap, seed)?;
            let indicators = build_indicators(&emb, &cfg)?;
            let (pool, train_log) = train_pool(&w, &examples, Some(&tags), &indicators, &cfg)?;
            let checksum = save_pool(&pool, &indicators, &out)?;
            if let Some(log_path) = log {
                train_log.write_jsonl(&log_path)?;
            }
            println!(
                "trained pool (N={n_bases}, r={rank}) in {:.1}s, loss {:.4} -> {:.4}, checksum {checksum:016x}, saved to {}",
                train_log.wall_clock_secs,
                train_log.losses.first().unwrap_or(&f64::NAN),
                train_log.losses.last().unwrap_or(&f64::NAN),
                out.display()
            );
        }

        Command::Customize {
            pool,
            base,
            server,
            data,
            task,
            out,
            ratio,
            scorer,
            dc_size,
        } => {
            let base_w = Arc::new(load_base::<T>(&base)?);
            let scorer: Scorer = scorer.parse().map_err(anyhow::Error::msg)?;
            let (server_ctx, indicators) =
                server_context::<T>(&pool, base_w.clone(), &server, &data, ratio, scorer)?;
            let corpus = load_corpus(&data)?;
            let records = corpus
                .customization
                .get(&task)
                .with_context(|| format!("task {task} not in customization split"))?;
            let take = dc_size.unwrap_or(records.len()).min(records.len());
            let dc = lorapool_core::custom::CustomizationSet::new(
                records
                    .iter()
                    .take(take)
                    .map(|r| (r.prompt.clone(), r.answer.clone()))
                    .collect(),
            )?;
            let device = DeviceContext::new(base_w, indicators, server_ctx.pool_checksum, true);
            let req = device.make_request(&dc)?;
            let pkg = server_ctx.serve_blend(&req, &dc.prompts())?;
            std::fs::write(&out, pkg.to_bytes())?;
            println!(
                "customized for task {task}: |D_c|={take}, threshold {:.4}, package {} ({} prototypes)",
                pkg.threshold,
                out.display(),
                pkg.prototypes.len()
            );
        }

        Command::Eval {
            base,
            pkg,
            data,
            split,
            task,
        } => {
            let w = load_base::<T>(&base)?;
            let corpus = load_corpus(&data)?;
            let stop = stop_token_of(&w.config);
            let max_new = corpus.max_answer_len() + 2;
            let delta = match &pkg {
                Some(p) => {
                    let package = DeploymentPackage::<T>::from_bytes(&std::fs::read(p)?)?;
                    Some(package.adapter.to_delta_set(&w.config)?)
                }
                None => None,
            };
            let decoder = ModelDecoder {
                weights: &w,
                delta: delta.as_ref(),
                stop_token: stop,
            };
            let records: Vec<_> = match split.as_str() {
                "eval" => corpus.eval.values().flatten().collect(),
                "train" => corpus.train.iter().collect(),
                "calibration" => corpus.calibration.iter().collect(),
                other => bail!("unknown split {other}"),
            };
            let filtered: Vec<_> = match &task {
                Some(t) => records.into_iter().filter(|r| &r.task == t).collect(),
                None => records,
            };
            let res = evaluate(&decoder, filtered.iter().copied(), max_new)?;
            println!(
                "{}",
                serde_json::json!({"split": split, "task": task, "accuracy": res.accuracy, "correct": res.correct, "n": res.n})
            );
        }

        Command::CrossMatrix {
            pool,
            base,
            server,
            data,
            out,
        } => {
            let base_w = Arc::new(load_base::<T>(&base)?);
            let env = experiment_env::<T>(&data, base_w, Some(&server), Some(&pool), None, seed, &out, None)?;
            let report = run_experiment("diagonal-dominance", &env)?;
            print_report(&report);
        }

        Command::Calibrate { scores, ratio } => {
            let text = std::fs::read_to_string(&scores)?;
            let values: Vec<f64> = text
                .split_whitespace()
                .map(|s| s.parse::<f64>().with_context(|| format!("bad score {s}")))
                .collect::<Result<_>>()?;
            let cal = calibrate_threshold(&values, ratio)?;
            println!("{}", serde_json::to_string_pretty(&cal)?);
        }

        Command::HybridEval {
            device_pkg,
            base,
            server,
            data,
            scorer,
            ratio,
            out,
        } => {
            let base_w = Arc::new(load_base::<T>(&base)?);
            let server_w = load_base::<T>(&server)?;
            let corpus = load_corpus(&data)?;
            let pkg = DeploymentPackage::<T>::from_bytes(&std::fs::read(&device_pkg)?)?;
            let scorer: Scorer = scorer.parse().map_err(anyhow::Error::msg)?;
            let stop = stop_token_of(&base_w.config);
            let max_new = corpus.max_answer_len() + 2;

            let device = DeviceContext::new(
                base_w.clone(),
                // indicators are not needed for decoding; a trivial set rides along
                lorapool_core::adapters::IndicatorSet::new(
                    lorapool_core::numerics::PcaProjection::identity(base_w.config.d_model),
                    lorapool_core::numerics::CentroidSet {
                        centroids: lorapool_core::numerics::Matrix::from_vec(
                            1,
                            base_w.config.d_model,
                            vec![T::ONE; base_w.config.d_model],
                        ),
                    },
                )
                .expect("identity indicators"),
                pkg.pool_checksum,
                true,
            );
            device.apply_package(&pkg)?;
            let run = hybrid_eval_run(
                &device,
                Some(&server_w),
                &pkg.prototypes,
                &corpus,
                scorer,
                ratio,
                max_new,
                stop,
            )?;
            std::fs::create_dir_all(&out)?;
            let path = out.join("hybrid_eval.json");
            std::fs::write(&path, serde_json::to_string_pretty(&run)?)?;
            println!("{}", serde_json::to_string_pretty(&run.row)?);
            println!("report written to {}", path.display());
        }

        Command::Experiment {
            name,
            data,
            base,
            server,
            pool,
            log,
            out,
            iters,
        } => {
            if !EXPERIMENT_NAMES.contains(&name.as_str()) {
                bail!("unknown experiment {name}; available: {}", EXPERIMENT_NAMES.join(", "));
            }
            let base_w = Arc::new(load_base::<T>(&base)?);
            let env = experiment_env::<T>(
                &data,
                base_w,
                server.as_deref(),
                pool.as_deref(),
                log.as_deref(),
                seed,
                &out,
                iters,
            )?;
            let report = run_experiment(&name, &env)?;
            print_report(&report);
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn experiment_env<T: Real>(
    data: &Path,
    base: Arc<TransformerWeights<T>>,
    server: Option<&Path>,
    pool: Option<&Path>,
    log: Option<&Path>,
    seed: u64,
    out: &Path,
    iters: Option<usize>,
) -> Result<ExperimentEnv<T>> {
    let corpus = load_corpus(data)?;
    let server_weights = match server {
        Some(p) => Some(Arc::new(load_base::<T>(p)?)),
        None => None,
    };
    let pool = match pool {
        Some(p) => Some(load_pool::<T>(p)?),
        None => None,
    };
    let train_log = match log {
        Some(p) => Some(TrainLog::read_jsonl(p)?),
        None => None,
    };
    let mut pool_train = TrainConfig {
        seed,
        ..TrainConfig::desk()
    };
    if let Some(v) = iters {
        pool_train.max_iters = v;
    }
    Ok(ExperimentEnv {
        corpus,
        device_base: base,
        server_weights,
        pool,
        train_log,
        pool_train,
        routing_ratio: 0.2,
        seed,
        out_dir: out.to_path_buf(),
    })
}

fn print_report(report: &EvalReport) {
    println!("{}", serde_json::to_string_pretty(report).expect("report json"));
}
