//! Local adaptation and whole communication rounds.

use airmeta_bench::simulator;
use airmeta_core::{local_rounds, stream_rng, Pipeline, Stream};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn bench_local_rounds(c: &mut Criterion) {
    let mut group = c.benchmark_group("local_rounds");
    for d in [10, 20, 50] {
        let sim = simulator(d, d / 2);
        let state = sim.initial_state().unwrap();
        let (eta, alpha) = sim.schedule_at(0);
        let lcfg = sim.local_config(alpha);
        group.bench_function(BenchmarkId::from_parameter(d), |b| {
            let mut r = stream_rng(1, Stream::LocalSgd, 0, 0);
            b.iter(|| local_rounds(sim.env(), black_box(&state.theta), &sim.datasets()[0], &lcfg, eta, &mut r).unwrap())
        });
    }
    group.finish();
}

fn bench_round(c: &mut Criterion) {
    let mut group = c.benchmark_group("round");
    for d in [10, 20, 50] {
        let sim = simulator(d, d / 2);
        let state = sim.initial_state().unwrap();
        group.bench_function(BenchmarkId::new("air", d), |b| {
            b.iter(|| sim.run_round(black_box(&state), 0, Pipeline::Air, None).unwrap())
        });
        group.bench_function(BenchmarkId::new("ideal", d), |b| {
            b.iter(|| sim.run_round(black_box(&state), 0, Pipeline::Ideal, None).unwrap())
        });
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = bench_local_rounds, bench_round
}
criterion_main!(benches);
