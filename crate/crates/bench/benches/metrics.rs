use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vstab_core::metrics::{multi_quantile_change, rmsse, smapc};

const LEVELS: [f64; 13] = [0.005, 0.025, 0.05, 0.1, 0.15, 0.25, 0.5, 0.75, 0.85, 0.9, 0.95, 0.975, 0.995];

fn noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.0..100.0)).collect()
}

fn tracks(rng: &mut ChaCha8Rng, h: usize) -> Vec<Vec<f64>> {
    let base = noise(rng, h);
    LEVELS
        .iter()
        .map(|q| base.iter().map(|b| b + (q - 0.5) * 40.0).collect())
        .collect()
}

fn bench_metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut group = c.benchmark_group("metrics");
    for h in [7usize, 28, 364] {
        let (a, b) = (noise(&mut rng, h), noise(&mut rng, h));
        group.bench_with_input(BenchmarkId::new("smapc", h), &h, |bch, _| {
            bch.iter(|| smapc(black_box(&a), black_box(&b)).unwrap())
        });
        let train = noise(&mut rng, 1000);
        group.bench_with_input(BenchmarkId::new("rmsse", h), &h, |bch, _| {
            bch.iter(|| rmsse(black_box(&a), black_box(&b), black_box(&train), 7).unwrap())
        });
        let (ta, tb) = (tracks(&mut rng, h), tracks(&mut rng, h));
        group.bench_with_input(BenchmarkId::new("mqc", h), &h, |bch, _| {
            bch.iter(|| multi_quantile_change(black_box(&ta), black_box(&tb), &LEVELS).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_metrics);
criterion_main!(benches);
