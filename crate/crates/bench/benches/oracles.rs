//! Throughput of the oracle query, the eigen-solvers and the planner.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sospkit::harness::plan_spider;
use sospkit::linalg::dense_smallest_eigenpair;
use sospkit::oracles::GradientOracle;
use sospkit_bench::{interior_point, objective, spider_oracle, sweep_config};

fn oracle_query(c: &mut Criterion) {
    let mut group = c.benchmark_group("spider_query");
    for &(m, b1) in &[(1usize, 64usize), (4, 64), (1, 1024)] {
        let obj = objective("double-well", 32);
        let x = interior_point(&obj, 1);
        group.bench_with_input(BenchmarkId::new(format!("m{m}"), b1), &b1, |bench, &b1| {
            // drift threshold zero: every query is an anchor
            let mut oracle = spider_oracle(&obj, m, b1, 8, f64::MIN_POSITIVE);
            bench.iter(|| {
                let out = oracle.query(black_box(&x)).expect("query");
                oracle.after_step(1e-3, &out.g_hat);
                black_box(out.g_hat)
            });
        });
    }
    group.finish();
}

fn eigensolvers(c: &mut Criterion) {
    let mut group = c.benchmark_group("lambda_min");
    for &(name, d) in &[("double-well", 64usize), ("quad-saddle", 64), ("logreg-ncvx", 16)] {
        let obj = objective(name, d);
        let x = interior_point(&obj, 2);
        group.bench_function(BenchmarkId::new(format!("power/{name}"), d), |b| {
            b.iter(|| obj.smallest_eig(black_box(&x), 1e-10).expect("converges"))
        });
        group.bench_function(BenchmarkId::new(format!("dense/{name}"), d), |b| {
            b.iter(|| dense_smallest_eigenpair(&obj.hessian(black_box(&x)).expect("hessian")).expect("eig"))
        });
    }
    group.finish();
}

fn planner(c: &mut Criterion) {
    let mut group = c.benchmark_group("plan_spider");
    for &n in &[1_000usize, 64_000] {
        let cfg = sweep_config(10, n, 4);
        let obj = objective("double-well", 10);
        let bounds = obj.bounds();
        let privacy = cfg.privacy().expect("budget");
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, &n| {
            b.iter(|| plan_spider(&cfg, &bounds, n, 4, 10, &privacy).expect("plan"))
        });
    }
    group.finish();
}

criterion_group!(benches, oracle_query, eigensolvers, planner);
criterion_main!(benches);
