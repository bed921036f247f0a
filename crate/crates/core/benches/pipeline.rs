//! Data-parallel vs sequential benchmarks for the pipeline's hot paths:
//! synthetic sample generation and per-sample gradient computation.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rayon::prelude::*;
use std::hint::black_box;
use tsrlab_core::config::RunConfig;
use tsrlab_core::losses::Stage;
use tsrlab_core::model::{ModelConfig, TsrModel};
use tsrlab_core::synth::{generate_sample, Difficulty, WarpLevel};
use tsrlab_core::train::{build_sample_loss, prepare_work_sample, WorkSample};
use tsrlab_nn::Tape;

fn bench_generation(c: &mut Criterion) {
    let mut group = c.benchmark_group("generate_16_samples");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("seq", ""), |b| {
        b.iter(|| {
            (0..16u64)
                .map(|i| generate_sample(black_box(i), Difficulty::Spans, WarpLevel::Mild).unwrap())
                .count()
        })
    });
    group.bench_function(BenchmarkId::new("par", ""), |b| {
        b.iter(|| {
            (0..16u64)
                .into_par_iter()
                .map(|i| generate_sample(black_box(i), Difficulty::Spans, WarpLevel::Mild).unwrap())
                .count()
        })
    });
    group.finish();
}

fn bench_batch_gradients(c: &mut Criterion) {
    let run = RunConfig::preset("desk").unwrap();
    let model = TsrModel::new(
        ModelConfig {
            stem_channels: 8,
            stage_channels: [8, 12, 16, 24],
            blocks_per_stage: 1,
            p2_channels: 16,
            highres_channels: 32,
            dim: 32,
            heads: 4,
            ffn_dim: 128,
            cell_dim: 32,
            sampling_points: 2,
            ..ModelConfig::desk()
        },
        0,
    )
    .unwrap();
    let work: Vec<WorkSample> = (0..4u64)
        .map(|i| {
            let s = generate_sample(i, Difficulty::Spans, WarpLevel::Mild).unwrap();
            prepare_work_sample(&s, 128).unwrap()
        })
        .collect();
    let grads_of = |ws: &WorkSample| {
        let mut t = Tape::new();
        let g = build_sample_loss(&mut t, &model, ws, Stage::Full, &run.loss, 64).unwrap();
        let grads = t.backward(g.total);
        black_box(&grads);
    };
    let mut group = c.benchmark_group("batch4_fwd_bwd");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("seq", ""), |b| {
        b.iter(|| work.iter().for_each(&grads_of))
    });
    group.bench_function(BenchmarkId::new("par", ""), |b| {
        b.iter(|| work.par_iter().for_each(&grads_of))
    });
    group.finish();
}

criterion_group!(benches, bench_generation, bench_batch_gradients);
criterion_main!(benches);
