//! Sequential vs rayon-parallel execution over the same workloads, plus
//! brute-force vs two-stage query cost.

use std::hint::black_box;

use camr::data::{gen_blobs, BlobSpec, LabeledDataset};
use camr::encoder::{init_encoder, Activation, EncoderModel};
use camr::metrics::{evaluate, SearchMode};
use camr::retrieval::{build_index, RetrievalIndex};
use camr::trainer::{train, AnchorInit, TrainConfig};
use camr::{Exec, RngSeed};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn blobs() -> LabeledDataset {
    gen_blobs(&BlobSpec::default(), RngSeed(42)).unwrap()
}

fn encoder() -> EncoderModel {
    init_encoder(&[64, 32, 8], Activation::Tanh, RngSeed(42)).unwrap()
}

fn trained_index(data: &LabeledDataset) -> RetrievalIndex {
    let config = TrainConfig {
        epochs: 20,
        anchor_init: AnchorInit::Random,
        ..TrainConfig::default()
    };
    let out = train(&config, data, encoder()).unwrap();
    let gallery = out.model.embed_rows(data.features(), Exec::Parallel).unwrap();
    build_index(gallery, data.labels().to_vec(), out.anchors).unwrap()
}

fn training_epoch(c: &mut Criterion) {
    let data = blobs();
    let mut group = c.benchmark_group("train_epoch");
    group.sample_size(10);
    for (name, exec) in MODES {
        let config = TrainConfig {
            epochs: 1,
            batch_size: 256,
            anchor_init: AnchorInit::Random,
            exec,
            ..TrainConfig::default()
        };
        group.bench_function(name, |b| b.iter(|| train(&config, &data, encoder()).unwrap()));
    }
    group.finish();
}

fn embedding(c: &mut Criterion) {
    let data = blobs();
    let model = encoder();
    let mut group = c.benchmark_group("embed_rows");
    for (name, exec) in MODES {
        group.bench_function(name, |b| b.iter(|| model.embed_rows(black_box(data.features()), exec).unwrap()));
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let data = blobs();
    let index = trained_index(&data);
    let queries = index.gallery().select_rows(&(0..200).map(|i| i * 10).collect::<Vec<_>>());
    let labels: Vec<usize> = (0..200).map(|i| data.labels()[i * 10]).collect();
    let mut group = c.benchmark_group("evaluate");
    group.sample_size(20);
    for (name, exec) in MODES {
        for (mode_name, mode) in [("brute", SearchMode::Brute), ("two-stage", SearchMode::TwoStage)] {
            group.bench_with_input(BenchmarkId::new(name, mode_name), &mode, |b, &mode| {
                b.iter(|| evaluate(&index, &queries, &labels, &[20, 100], mode, exec).unwrap())
            });
        }
    }
    group.finish();
}

fn single_query(c: &mut Criterion) {
    let data = blobs();
    let index = trained_index(&data);
    let q = index.gallery().row(123).to_vec();
    let mut group = c.benchmark_group("query_top20");
    group.bench_function("brute", |b| b.iter(|| index.brute_force_query(black_box(&q), 20).unwrap()));
    group.bench_function("two-stage", |b| b.iter(|| index.two_stage_query(black_box(&q), 20).unwrap()));
    group.finish();
}

criterion_group!(benches, training_epoch, embedding, evaluation, single_query);
criterion_main!(benches);
