use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use dictmlm_core::corpus::RawSentence;
use dictmlm_core::examplegen::{generate, GenConfig};
use dictmlm_core::synthlang::{SynthConfig, SynthWorld};
use dictmlm_core::tensor::kernels;
use dictmlm_core::tokenizer::train_vocab_with_workers;

fn workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get()).max(2)
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul_nn");
    for &(m, k, n) in &[(64, 64, 64), (1024, 64, 256), (2048, 256, 64)] {
        let a: Vec<f64> = (0..m * k).map(|i| (i % 17) as f64 * 0.1).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i % 13) as f64 * 0.1).collect();
        let mut out = vec![0.0; m * n];
        let id = format!("{m}x{k}x{n}");
        group.bench_with_input(BenchmarkId::new("seq", &id), &(), |bch, _| {
            bch.iter(|| kernels::seq_matmul_nn(black_box(&a), black_box(&b), m, k, n, &mut out))
        });
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("par", &id), &(), |bch, _| {
            bch.iter(|| kernels::par_matmul_nn(black_box(&a), black_box(&b), m, k, n, &mut out))
        });
    }
    group.finish();
}

fn pipeline(c: &mut Criterion) {
    let world = SynthWorld::generate(SynthConfig { sentences_per_language: 2000, ..SynthConfig::default() }).unwrap();
    let mut sentences = Vec::new();
    for l in world.registry.ids() {
        sentences.extend(world.corpus(l, 1).into_iter().map(|text| RawSentence { text, lang: l }));
    }
    let texts: Vec<&str> = sentences.iter().map(|s| s.text.as_str()).collect();
    let vocab = train_vocab_with_workers(texts.iter().copied(), 600, 2, 1).unwrap();
    let lex = world.lexicon();
    let cfg = GenConfig { duplication: 2, ..GenConfig::default() };

    let mut group = c.benchmark_group("generate");
    group.sample_size(10);
    for w in [1, workers()] {
        group.bench_with_input(BenchmarkId::from_parameter(w), &w, |b, &w| {
            b.iter(|| generate(black_box(&sentences), &cfg, &lex, &vocab, w).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("train_vocab");
    group.sample_size(10);
    for w in [1, workers()] {
        group.bench_with_input(BenchmarkId::from_parameter(w), &w, |b, &w| {
            b.iter(|| train_vocab_with_workers(texts.iter().copied(), 600, 2, w).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, pipeline);
criterion_main!(benches);
