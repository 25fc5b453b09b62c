use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use recindial::evalsuite::{bleu_n, distinct_n, rouge_l};
use recindial::kgraph::{rgcn_forward, KgDims};
use recindial::pipeline::ExperimentConfig;
use recindial::seqmodel::{forward_logits, LogitScorer};
use recindial_bench::{longest_test_pair, random_kg, random_responses, recommender, synthetic};

fn rgcn(c: &mut Criterion) {
    let mut group = c.benchmark_group("rgcn_forward");
    for &n in &[40, 1_000, 10_000] {
        let (kg, p) = random_kg(n, 8, 4, KgDims { entity_dim: 64, attention_dim: 32, layers: 1 }, 0);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| b.iter(|| rgcn_forward(black_box(&kg), &p).unwrap()));
    }
    group.finish();
}

fn language_model(c: &mut Criterion) {
    let data = synthetic(200);
    let pair = longest_test_pair(&data);
    let mut group = c.benchmark_group("language_model");
    for (label, config) in [("toy", ExperimentConfig::toy()), ("default", ExperimentConfig::default())] {
        let rec = recommender(&data, &config);
        let context = rec.model_context(&pair.context, config.decode.n_max);
        group.bench_function(BenchmarkId::new("forward_logits", label), |b| {
            b.iter(|| forward_logits(&rec.model.lm, black_box(&context)).unwrap())
        });
        group.bench_function(BenchmarkId::new("score", label), |b| b.iter(|| rec.model.lm.score(black_box(&context)).unwrap()));
    }
    group.finish();
}

fn beam(c: &mut Criterion) {
    let data = synthetic(200);
    let pair = longest_test_pair(&data);
    let config = ExperimentConfig::toy();
    let rec = recommender(&data, &config);
    let entities = rec.kg.resolve(&pair.entity_set);
    let mut group = c.benchmark_group("beam_generate");
    group.sample_size(10);
    for width in [1, 5, 10] {
        let decode = recindial::DecodeConfig { beam_width: width, ..config.decode };
        group.bench_with_input(BenchmarkId::from_parameter(width), &width, |b, _| {
            b.iter(|| rec.recommend(black_box(&pair.context), &entities, &decode).unwrap())
        });
    }
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let hyps = random_responses(1_000, 2_000, 1);
    let refs = random_responses(1_000, 2_000, 2);
    let mut group = c.benchmark_group("metrics");
    group.bench_function("distinct_2_4", |b| b.iter(|| (2..=4).map(|n| distinct_n(black_box(&hyps), n)).sum::<f64>()));
    group.bench_function("bleu_4", |b| b.iter(|| hyps.iter().zip(&refs).map(|(h, r)| bleu_n(h, r, 4)).sum::<f64>()));
    group.bench_function("rouge_l", |b| b.iter(|| hyps.iter().zip(&refs).map(|(h, r)| rouge_l(h, r)).sum::<f64>()));
    group.finish();
}

criterion_group!(benches, rgcn, language_model, beam, metrics);
criterion_main!(benches);
