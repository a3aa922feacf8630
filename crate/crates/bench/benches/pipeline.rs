use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use sekit_bench::{desk_config, desk_model, noisy_speech};
use sekit_core::dsp::{self, StftConfig};
use sekit_core::eval::{self, argmax_routing};
use sekit_core::network::{count_flops, BranchUsage, Routing};
use sekit_core::train::{TrainConfig, TrainSet, Trainer};

fn stft(c: &mut Criterion) {
    let (_, x) = noisy_speech(2.0, 1);
    let cfg = StftConfig::default();
    let spec = dsp::stft(&x, cfg).unwrap();
    let mut g = c.benchmark_group("stft");
    g.throughput(Throughput::Elements(x.len() as u64));
    g.bench_function("forward_2s", |b| b.iter(|| dsp::stft(black_box(&x), cfg).unwrap()));
    g.bench_function("inverse_2s", |b| b.iter(|| dsp::istft(black_box(&spec), cfg.hop, x.len()).unwrap()));
    g.finish();
}

fn enhance(c: &mut Criterion) {
    let model = desk_model();
    let (_, x) = noisy_speech(2.0, 2);
    let mut g = c.benchmark_group("enhance_2s");
    g.sample_size(10);
    for (name, routing) in [
        ("local", Routing::AllLocal),
        ("nonlocal", Routing::AllNonLocal),
        ("policy", argmax_routing()),
        ("random", Routing::Random { seed: 0 }),
    ] {
        g.bench_with_input(BenchmarkId::from_parameter(name), &routing, |b, r| {
            b.iter(|| eval::enhance(&model, black_box(&x), r).unwrap())
        });
    }
    g.finish();
}

fn flops(c: &mut Criterion) {
    let cfg = desk_config();
    let usage = vec![BranchUsage::NONLOCAL; cfg.n_dynamic_blocks];
    c.bench_function("count_flops_t512", |b| {
        b.iter(|| count_flops(black_box(&cfg), 512, &usage, true).unwrap())
    });
}

fn metrics(c: &mut Criterion) {
    let (clean, x) = noisy_speech(3.0, 3);
    let mut g = c.benchmark_group("metrics_3s");
    g.bench_function("stoi", |b| b.iter(|| eval::stoi(black_box(&clean), black_box(&x)).unwrap()));
    g.bench_function("si_sdr", |b| b.iter(|| eval::si_sdr(black_box(&clean), black_box(&x)).unwrap()));
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let cfg = desk_config();
    let stft = cfg.stft();
    let pairs: Vec<_> = (0..4)
        .map(|i| {
            let (clean, x) = noisy_speech(1.0, 10 + i);
            let to = |w| dsp::spec_to_channels(&dsp::stft(w, stft).unwrap());
            (to(&x), to(&clean))
        })
        .collect();
    let set = TrainSet::from_pairs(&pairs, stft);
    let (noisy, clean) = set.batches(4, 0).unwrap().remove(0);
    let mut t = Trainer::new(TrainConfig {
        network: cfg,
        batch_size: 4,
        ..TrainConfig::default()
    })
    .unwrap();
    let mut g = c.benchmark_group("train_step_batch4_1s");
    g.sample_size(10);
    g.bench_function("stage1", |b| b.iter(|| t.stage1_step(&noisy, &clean).unwrap()));
    g.bench_function("stage2", |b| b.iter(|| t.stage2_step(&noisy, &clean).unwrap()));
    g.finish();
}

criterion_group!(benches, stft, enhance, flops, metrics, train_step);
criterion_main!(benches);
