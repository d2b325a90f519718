//! Per-device and per-round kernels: sparsification, compression, estimation.

use airmeta_bench::{compression, rng, signal};
use airmeta_core::{
    comp_k, estimate, make_compression, sample_channel, transmit_mac, CVector, CompressionKind, EstimatorKind,
    FadingModel, SparsifyMode, TransmitPacket,
};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn bench_comp_k(c: &mut Criterion) {
    let mut group = c.benchmark_group("comp_k");
    for d in [100, 1000, 10_000] {
        let x = signal(d);
        let k = d / 10;
        group.bench_with_input(BenchmarkId::new("top_k", d), &x, |b, x| {
            let mut r = rng(2);
            b.iter(|| comp_k(black_box(x), k, SparsifyMode::TopK, &mut r).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("rand_k", d), &x, |b, x| {
            let mut r = rng(3);
            b.iter(|| comp_k(black_box(x), k, SparsifyMode::RandK, &mut r).unwrap())
        });
    }
    group.finish();
}

fn bench_make_compression(c: &mut Criterion) {
    let mut group = c.benchmark_group("make_compression");
    for d in [20, 100, 400] {
        let m = d / 2;
        group.bench_function(BenchmarkId::new("partial_dft", d), |b| {
            let mut r = rng(4);
            b.iter(|| make_compression(CompressionKind::PartialDft, m, d, &mut r).unwrap())
        });
        group.bench_function(BenchmarkId::new("row_subset_unitary", d), |b| {
            let mut r = rng(5);
            b.iter(|| make_compression(CompressionKind::RowSubsetUnitary, m, d, &mut r).unwrap())
        });
    }
    group.finish();
}

fn bench_air_aggregation(c: &mut Criterion) {
    let mut group = c.benchmark_group("air_aggregation");
    let n = 10;
    for d in [20, 100, 400] {
        let m = d / 2;
        let a = compression(CompressionKind::PartialDft, m, d);
        let active: Vec<usize> = (0..n).collect();
        let ch = sample_channel(&active, FadingModel::RayleighCn01, 0.01, m, &mut rng(6)).unwrap();
        let s = signal(m);
        let packets: Vec<TransmitPacket> = active
            .iter()
            .map(|&id| TransmitPacket {
                device_id: id,
                x: CVector::from_fn(m, |i, _| ch.gains[&id].conj() * (s[i] / ch.gains[&id].norm_sqr())),
            })
            .collect();
        group.bench_function(BenchmarkId::new("transmit_mac", d), |b| {
            b.iter(|| transmit_mac(black_box(&packets), &ch).unwrap())
        });
        let y = transmit_mac(&packets, &ch).unwrap();
        group.bench_function(BenchmarkId::new("lmmse", d), |b| {
            b.iter(|| estimate(black_box(&y), &a, 1.0, 0.01, EstimatorKind::Lmmse).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_comp_k, bench_make_compression, bench_air_aggregation);
criterion_main!(benches);
