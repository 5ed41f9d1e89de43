//! End-to-end pipeline invariants on a small world: the blend weights each
//! cross-matrix column uses must equal the independently recomputed
//! user-embedding cosine chain, and identical customization sets must yield
//! identical columns.

use std::sync::Arc;

use lorapool_core::custom::ServerContext;
use lorapool_core::hybrid::Scorer;
use lorapool_core::model::{first_layer_queries, ModelConfig, Precision, TransformerWeights};
use lorapool_core::numerics::{cosine_similarity, dot};
use lorapool_core::train::{
    build_indicators, extract_embeddings, pretrain, train_pool, PretrainConfig, TrainConfig,
};
use lorapool_harness::corpus::{gen_corpus, CorpusCounts};
use lorapool_harness::eval::Pipeline;
use lorapool_harness::tasks::{default_benchmark, Vocab};

fn small_pipeline() -> Pipeline<f64> {
    let mut tasks = default_benchmark(11);
    tasks.truncate(3);
    let counts = CorpusCounts {
        train_per_task: 60,
        customization_per_task: 5,
        eval_per_task: 8,
        calibration_per_task: 8,
    };
    let corpus = gen_corpus(&tasks, &counts, 11).unwrap();
    let cfg = ModelConfig {
        vocab_size: 32,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        max_seq: 26,
        precision: Precision::F64,
    };
    let mut device = TransformerWeights::<f64>::init(cfg, 11).unwrap();
    let examples = corpus.train_examples();
    pretrain(
        &mut device,
        &examples,
        &PretrainConfig {
            max_iters: 40,
            batch_size: 8,
            seed: 11,
            ..Default::default()
        },
    )
    .unwrap();
    let device = Arc::new(device);

    let train_cfg = TrainConfig {
        n_bases: 3,
        rank: 2,
        pca_dim: 4,
        batch_size: 8,
        max_iters: 20,
        seed: 11,
        ..TrainConfig::desk()
    };
    let emb = extract_embeddings(&device, &examples, 1000, 11).unwrap();
    let ind = build_indicators(&emb, &train_cfg).unwrap();
    let tags = corpus.train_tags();
    let (pool, _) = train_pool(&device, &examples, Some(&tags), &ind, &train_cfg).unwrap();
    let checksum = pool.checksum();
    let stop = Vocab::new(26).eos();
    let max_new = corpus.max_answer_len() + 2;
    Pipeline {
        corpus: corpus.clone(),
        device_base: device.clone(),
        server: ServerContext {
            pool,
            pool_checksum: checksum,
            server_weights: device.clone(),
            device_base: device,
            calibration_prompts: corpus.calibration.iter().map(|r| r.prompt.clone()).collect(),
            target_ratio: 0.25,
            scorer: Scorer::Prototype,
            decode_max_new: max_new,
            stop_token: Some(stop),
        },
        indicators: ind,
        max_new,
        stop_token: stop,
    }
}

/// Recomputes the user-embedding chain by hand: mean of first-layer queries
/// over the customization prompts, centered PCA projection, cosine per
/// centroid, then (c + 1) / 2.
fn recompute_alphas(pipeline: &Pipeline<f64>, task: &str) -> Vec<f64> {
    let records = &pipeline.corpus.customization[task];
    let d = pipeline.device_base.config.d_model;
    let mut q_c = vec![0.0f64; d];
    for r in records {
        let q = first_layer_queries(&pipeline.device_base, &r.prompt).unwrap();
        for (o, v) in q_c.iter_mut().zip(q) {
            *o += v / records.len() as f64;
        }
    }
    let ind = &pipeline.indicators;
    let centered: Vec<f64> = q_c.iter().zip(ind.pca.mean.iter()).map(|(x, m)| x - m).collect();
    let projected: Vec<f64> = (0..ind.pca.out_dim)
        .map(|r| dot(ind.pca.components.row(r), &centered))
        .collect();
    (0..ind.n_bases)
        .map(|n| {
            let c = cosine_similarity(&projected, ind.centroids.centroid(n)).unwrap();
            (c + 1.0) * 0.5
        })
        .collect()
}

#[test]
fn matrix_columns_use_the_recomputed_alpha_chain() {
    let pipeline = small_pipeline();
    let matrix = pipeline.cross_task_matrix().unwrap();
    for task in &matrix.tasks {
        let want = recompute_alphas(&pipeline, task);
        let got = &matrix.alphas[task];
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-12, "alpha mismatch for {task}: {g} vs {w}");
        }
    }
}

#[test]
fn identical_customization_sets_give_identical_columns() {
    let pipeline = small_pipeline();
    let task = pipeline.corpus.task_ids()[0].clone();
    let (device_a, pkg_a, req_a) = pipeline.customize_for_task(&task, None).unwrap();
    let (device_b, pkg_b, req_b) = pipeline.customize_for_task(&task, None).unwrap();
    assert_eq!(req_a.to_bytes(), req_b.to_bytes());
    assert_eq!(pkg_a.to_bytes(), pkg_b.to_bytes());
    for records in pipeline.corpus.eval.values() {
        for r in records {
            let a = device_a.decode(&r.prompt, pipeline.max_new, Some(pipeline.stop_token)).unwrap();
            let b = device_b.decode(&r.prompt, pipeline.max_new, Some(pipeline.stop_token)).unwrap();
            assert_eq!(a.tokens, b.tokens);
        }
    }
}
