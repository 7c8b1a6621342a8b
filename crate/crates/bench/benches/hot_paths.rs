use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use postq::allocator::{dp_oracle_bucketized, greedy_allocate};
use postq::codebook::{expected_mse_uniform, lloyd_scalar, optimize_range, LloydInit, RangeObjective, DEFAULT_RANGE};
use postq::packer::{pack_indices, unpack_indices};
use postq::posterior::{hutchinson_diag, DenseOracle};
use postq_bench::{allocation_problem, indices};

fn closed_forms(c: &mut Criterion) {
    c.bench_function("expected_mse_uniform m=4", |b| b.iter(|| expected_mse_uniform(black_box(4), black_box(2.5))));
    c.bench_function("optimize_range m=3", |b| {
        b.iter(|| optimize_range(black_box(3), DEFAULT_RANGE, RangeObjective::Saturating))
    });
    c.bench_function("lloyd_scalar K=16", |b| {
        b.iter(|| lloyd_scalar(black_box(16), LloydInit::Uniform, 1e-4, 15))
    });
}

fn allocation(c: &mut Criterion) {
    let mut g = c.benchmark_group("greedy_allocate");
    for n in [100, 1000, 10000] {
        let p = allocation_problem(n, 7);
        g.bench_with_input(BenchmarkId::from_parameter(n), &p, |b, p| b.iter(|| greedy_allocate(p)));
    }
    g.finish();
    let p = allocation_problem(20, 7);
    c.bench_function("dp_oracle_bucketized 20 blocks", |b| b.iter(|| dp_oracle_bucketized(&p)));
}

fn packing(c: &mut Criterion) {
    let mut g = c.benchmark_group("pack_unpack_1e5");
    for w in [2u32, 3, 4, 8] {
        let q = indices(100_000, w, w as u64);
        g.bench_with_input(BenchmarkId::from_parameter(w), &q, |b, q| {
            b.iter(|| unpack_indices(&pack_indices(q, w).unwrap(), w, q.len()))
        });
    }
    g.finish();
}

fn curvature(c: &mut Criterion) {
    let d = 256;
    let m = nalgebra::DMatrix::from_fn(d, d, |i, j| if i == j { 2.0 } else { 1.0 / (1.0 + (i + j) as f64) });
    let oracle = DenseOracle::new(m);
    c.bench_function("hutchinson d=256 M=16", |b| b.iter(|| hutchinson_diag(&oracle, d, 16, 3)));
}

criterion_group!(benches, closed_forms, allocation, packing, curvature);
criterion_main!(benches);
