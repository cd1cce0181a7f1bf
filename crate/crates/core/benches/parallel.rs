//! Parallel vs sequential execution of the data-parallel hot loops.
//!
//! Run with `cargo bench -p ddpnkit --bench parallel`. Building with
//! `--no-default-features` turns `exec::map` into the sequential path, in
//! which case both rows should match.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ddpnkit::distributions::PredictiveDistribution;
use ddpnkit::exec;
use ddpnkit::metrics::crps;
use ddpnkit::moments::{logspace, mdf_epsilon, DEFAULT_N_TERMS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn grid_cells(n: usize) -> Vec<(f64, f64)> {
    let axis = logspace(0.01, 40.0, n);
    axis.iter()
        .flat_map(|&m| axis.iter().map(move |&v| (m, v)))
        .collect()
}

fn crps_batch(n: usize) -> Vec<(PredictiveDistribution, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    (0..n)
        .map(|_| {
            let mu = rng.random_range(1.0..40.0);
            let gamma = rng.random_range(0.3..5.0);
            let y = rng.random_range(0..60) as f64;
            (PredictiveDistribution::double_poisson(mu, gamma).unwrap(), y)
        })
        .collect()
}

fn moments_grid(c: &mut Criterion) {
    let mut group = c.benchmark_group("moments_grid");
    group.sample_size(10);
    for n in [11, 21] {
        let cells = grid_cells(n);
        let run = |(m, v): &(f64, f64)| mdf_epsilon(*m, *v, DEFAULT_N_TERMS).unwrap().eps1;
        group.bench_with_input(BenchmarkId::new("parallel", n * n), &cells, |b, cells| {
            b.iter(|| black_box(exec::map(cells, run)))
        });
        group.bench_with_input(BenchmarkId::new("sequential", n * n), &cells, |b, cells| {
            b.iter(|| black_box(exec::map_seq(cells, run)))
        });
    }
    group.finish();
}

fn crps_batches(c: &mut Criterion) {
    let mut group = c.benchmark_group("crps");
    for n in [256, 2048] {
        let batch = crps_batch(n);
        let run = |(d, y): &(PredictiveDistribution, f64)| crps(d, *y).unwrap();
        group.bench_with_input(BenchmarkId::new("parallel", n), &batch, |b, batch| {
            b.iter(|| black_box(exec::map(batch, run)))
        });
        group.bench_with_input(BenchmarkId::new("sequential", n), &batch, |b, batch| {
            b.iter(|| black_box(exec::map_seq(batch, run)))
        });
    }
    group.finish();
}

criterion_group!(benches, moments_grid, crps_batches);
criterion_main!(benches);
