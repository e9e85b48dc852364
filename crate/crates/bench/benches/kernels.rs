use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::{DMatrix, DVector};
use sparsegrad::{
    estimate_gradient, gaussian_matrix, make_function, solve_bpdn, sp_measure_averaged, symmetric_eigen, EstimatorConfig,
    FunctionSpec, SolverOptions,
};
use std::hint::black_box;

fn homotopy(c: &mut Criterion) {
    let mut group = c.benchmark_group("solve_bpdn");
    for &(m, n, s) in &[(50, 1000, 5), (100, 2500, 10), (200, 10_000, 20)] {
        let a = gaussian_matrix(m, n, 7).unwrap();
        let mut x = DVector::zeros(n);
        for i in 0..s {
            x[(i * 37) % n] = if i % 2 == 0 { 1.0 } else { -0.5 };
        }
        let y = a.matrix() * &x;
        let opts = SolverOptions::new(1e-6 * y.norm(), m);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{m}x{n}")), &y, |b, y| {
            b.iter(|| solve_bpdn(&a, black_box(y), &opts).unwrap())
        });
    }
    group.finish();
}

fn measurement(c: &mut Criterion) {
    let mut group = c.benchmark_group("sp_measure_averaged");
    for &n in &[1000, 10_000] {
        let f = make_function(&FunctionSpec::QuadMmt { n, s: 3, seed: 1 }).unwrap();
        let obj = f.objective();
        let a = gaussian_matrix(50, n, 2).unwrap();
        let x = DVector::from_element(n, 0.1);
        group.bench_function(BenchmarkId::from_parameter(n), |b| {
            b.iter(|| sp_measure_averaged(&obj, black_box(&x), &a, 1e-4, 10, 3).unwrap())
        });
    }
    group.finish();
}

fn eigen(c: &mut Criterion) {
    let mut group = c.benchmark_group("symmetric_eigen");
    for &n in &[50, 200] {
        let g = gaussian_matrix(n, n + 1, 5).unwrap();
        let b: DMatrix<f64> = g.matrix().columns(0, n).into_owned();
        let s = &b * b.transpose();
        group.bench_function(BenchmarkId::from_parameter(n), |bench| bench.iter(|| symmetric_eigen(black_box(&s)).unwrap()));
    }
    group.finish();
}

fn estimate(c: &mut Criterion) {
    let f = make_function(&FunctionSpec::QuadMmt { n: 2500, s: 3, seed: 1 }).unwrap();
    let obj = f.objective();
    let x = DVector::from_element(2500, 0.1);
    let cfg = EstimatorConfig { m: 50, k: 10, ..Default::default() };
    c.bench_function("estimate_gradient/2500", |b| b.iter(|| estimate_gradient(&obj, black_box(&x), &cfg).unwrap()));
}

criterion_group!(benches, homotopy, measurement, eigen, estimate);
criterion_main!(benches);
