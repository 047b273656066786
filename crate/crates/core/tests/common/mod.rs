//! Independent oracles shared by the integration tests. Nothing here calls
//! into the loss, retrieval or metric code paths it is used to check.

#![allow(dead_code)]

use camr::data::{gen_blobs, split_per_class, BlobSpec, LabeledDataset};
use camr::encoder::{init_encoder, Activation, EncoderModel};
use camr::metrics::{evaluate, EvalReport, SearchMode};
use camr::retrieval::{build_index, RetrievalIndex};
use camr::trainer::{train, AnchorInit, TrainConfig, TrainOutcome};
use camr::{Exec, RngSeed};

pub const FD_STEP: f64 = 1e-5;

/// Central differences of `f` at `x`.
pub fn central_diff(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let up = f(&probe);
        probe[i] = x[i] - step;
        let down = f(&probe);
        probe[i] = x[i];
        out.push((up - down) / (2.0 * step));
    }
    out
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Attractor, repeller and minimum-norm terms written out from their
/// definitions. `anchors` is row-major `t x n`, `emb` row-major `batch x n`.
pub fn oracle_loss(emb: &[f64], labels: &[usize], anchors: &[f64], n: usize, m: f64, p: f64) -> [f64; 4] {
    let t = anchors.len() / n;
    let c = |j: usize| &anchors[j * n..(j + 1) * n];
    let batch = labels.len();
    let attract = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| 0.5 * dist(&emb[i * n..(i + 1) * n], c(y)).powi(2))
        .sum::<f64>()
        / batch as f64;
    let mut repel = 0.0;
    for y in 0..t {
        for z in 0..t {
            if y != z {
                repel += (2.0 * m - dist(c(y), c(z))).max(0.0).powi(2);
            }
        }
    }
    repel *= 0.5;
    let min_norm = 0.5 * (0..t).map(|y| (p - norm(c(y))).max(0.0).powi(2)).sum::<f64>();
    [attract, repel, min_norm, attract + repel + min_norm]
}

/// `(id, distance)` of every gallery row, fully sorted by distance then id.
pub fn exhaustive_ranking(gallery: &[Vec<f64>], q: &[f64]) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = gallery.iter().enumerate().map(|(i, g)| (i, dist(q, g))).collect();
    all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    all
}

/// Non-interpolated AP over a full ranking of labels.
pub fn oracle_ap(ranked_labels: &[usize], query: usize) -> f64 {
    let relevant = ranked_labels.iter().filter(|&&y| y == query).count();
    let mut seen = 0.0;
    let mut total = 0.0;
    for (rank, &y) in ranked_labels.iter().enumerate() {
        if y == query {
            seen += 1.0;
            total += seen / (rank as f64 + 1.0);
        }
    }
    total / relevant as f64
}

/// 10 classes x (200 train + 50 test), 64 inputs, separation 5.
pub fn blob_split(noise_std: f64, seed: u64) -> (LabeledDataset, LabeledDataset) {
    let spec = BlobSpec {
        classes: 10,
        per_class: 250,
        input_dim: 64,
        separation: 5.0,
        noise_std,
    };
    let all = gen_blobs(&spec, RngSeed(seed)).expect("blob generation");
    split_per_class(&all, 50)
}

pub fn mlp(embed_dim: usize, seed: u64) -> EncoderModel {
    init_encoder(&[64, 32, embed_dim], Activation::Tanh, RngSeed(seed)).expect("encoder")
}

pub struct Pipeline {
    pub outcome: TrainOutcome,
    pub index: RetrievalIndex,
    pub brute: EvalReport,
    pub two_stage: EvalReport,
    pub train_secs: f64,
}

/// Train on the train split, index its embeddings, query with the test split.
pub fn run_pipeline(train_set: &LabeledDataset, test_set: &LabeledDataset, model: EncoderModel, config: &TrainConfig) -> Pipeline {
    let started = std::time::Instant::now();
    let outcome = train(config, train_set, model).expect("training");
    let train_secs = started.elapsed().as_secs_f64();
    let exec = config.exec;
    let gallery = outcome.model.embed_rows(train_set.features(), exec).unwrap();
    let queries = outcome.model.embed_rows(test_set.features(), exec).unwrap();
    let index = build_index(gallery, train_set.labels().to_vec(), outcome.anchors.clone()).unwrap();
    let brute = evaluate(&index, &queries, test_set.labels(), &[20, 100], SearchMode::Brute, exec).unwrap();
    let two_stage = evaluate(&index, &queries, test_set.labels(), &[20, 100], SearchMode::TwoStage, exec).unwrap();
    Pipeline {
        outcome,
        index,
        brute,
        two_stage,
        train_secs,
    }
}

/// Blob benchmark configuration: Adam, lr 1e-3, 50 epochs, m = 2, p = 1.
pub fn benchmark_config(anchor_init: AnchorInit, exec: Exec) -> TrainConfig {
    TrainConfig {
        epochs: 50,
        batch_size: 32,
        lr: 1e-3,
        margin: 2.0,
        min_norm: 1.0,
        anchor_init,
        seed: RngSeed(42),
        exec,
        ..TrainConfig::default()
    }
}
