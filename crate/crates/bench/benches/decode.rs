//! Microbenchmarks for the decode hot path: per-step latency at several
//! context depths for full vs windowed attention, plus the dense kernels.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use wand_core::masking::{causal_full_mask, WindowSpec};
use wand_core::model::{Model, ModelConfig, SequenceLayout, Token};
use wand_core::numerics::{masked_softmax, matmul, Matrix, Rng};
use wand_core::HybridKVCache;

fn toy_model() -> Model {
    Model::init(ModelConfig::default(), &mut Rng::new(7)).unwrap()
}

fn filled_cache(model: &Model, window: WindowSpec, depth: usize) -> HybridKVCache {
    let prefix: Vec<Token> = (0..16).map(|i| (i % 256) as Token).collect();
    let mut cache =
        HybridKVCache::prefill_with_capacity(model, &prefix, window, depth + 8).unwrap();
    for i in 0..depth {
        model.decode_step(&mut cache, (i % 256) as Token).unwrap();
    }
    cache
}

fn bench_decode_step(c: &mut Criterion) {
    let model = toy_model();
    let mut group = c.benchmark_group("decode_step");
    for depth in [64usize, 512, 2048] {
        for (name, window) in [("full", WindowSpec::Unbounded), ("windowed_32", WindowSpec::Bounded(32))] {
            group.bench_function(format!("{name}/depth_{depth}"), |b| {
                b.iter_batched_ref(
                    || (filled_cache(&model, window, depth), vec![0.0f32; 256]),
                    |(cache, logits)| {
                        model.decode_step_into(cache, black_box(3), logits).unwrap();
                    },
                    BatchSize::SmallInput,
                );
            });
        }
    }
    group.finish();
}

fn bench_prefill(c: &mut Criterion) {
    let model = toy_model();
    let prefix: Vec<Token> = (0..128).map(|i| (i % 256) as Token).collect();
    c.bench_function("prefill_128", |b| {
        b.iter(|| {
            black_box(
                HybridKVCache::prefill(&model, black_box(&prefix), WindowSpec::Bounded(32))
                    .unwrap(),
            )
        })
    });
}

fn bench_batched_forward(c: &mut Criterion) {
    let model = toy_model();
    let layout = SequenceLayout::new(16, 112).unwrap();
    let mask = causal_full_mask(layout);
    let tokens: Vec<Token> = (0..128).map(|i| (i % 256) as Token).collect();
    c.bench_function("forward_128_causal", |b| {
        b.iter(|| black_box(model.forward(black_box(&tokens), &mask, false).unwrap()))
    });
}

fn bench_kernels(c: &mut Criterion) {
    let mut rng = Rng::new(3);
    let a = Matrix::from_vec(128, 128, (0..128 * 128).map(|_| rng.next_normal()).collect());
    let b = Matrix::from_vec(128, 512, (0..128 * 512).map(|_| rng.next_normal()).collect());
    c.bench_function("matmul_128x128x512", |bch| {
        bch.iter(|| black_box(matmul(black_box(&a), black_box(&b)).unwrap()))
    });

    let logits = Matrix::from_vec(128, 128, (0..128 * 128).map(|_| rng.next_normal()).collect());
    let mask = causal_full_mask(SequenceLayout::new(16, 112).unwrap());
    c.bench_function("masked_softmax_128", |bch| {
        bch.iter(|| black_box(masked_softmax(black_box(&logits), &mask.entries).unwrap()))
    });
}

criterion_group!(
    benches,
    bench_decode_step,
    bench_prefill,
    bench_batched_forward,
    bench_kernels
);
criterion_main!(benches);
