use criterion::{black_box, criterion_group, criterion_main, Criterion};

use seld::dsp::{extract_features, gcc_phat, stft};
use seld::metrics::evaluate;
use seld_bench::{clip_evals, features, noise};

fn front_end(c: &mut Criterion) {
    let w = noise(4, 10.0, 1);
    let cfg = features(64);
    c.bench_function("stft 4ch 10s", |b| {
        b.iter(|| stft(black_box(&w), cfg.fft_size, cfg.hop).unwrap())
    });
    let s = stft(&w, cfg.fft_size, cfg.hop).unwrap();
    c.bench_function("gcc_phat pair 10s", |b| {
        b.iter(|| gcc_phat(black_box(&s), 0, 1, 64).unwrap())
    });
    let mut g = c.benchmark_group("features");
    g.sample_size(20);
    g.bench_function("extract 4ch 10s", |b| {
        b.iter(|| extract_features(black_box(&w), &cfg).unwrap())
    });
    g.finish();
}

fn scoring(c: &mut Criterion) {
    let clips = clip_evals(20, 1000, 11, 2);
    c.bench_function("evaluate 20 clips", |b| {
        b.iter(|| evaluate(black_box(&clips)).unwrap())
    });
}

criterion_group!(benches, front_end, scoring);
criterion_main!(benches);
