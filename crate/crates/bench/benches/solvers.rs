use std::sync::Arc;

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use homoscale::bvp::solve_fine_1d;
use homoscale::cell_solver::SolveOptions;
use homoscale::corrector::{build_corrector, choose_parameters, one_scale_corrector};
use homoscale::{Calibration, ScaleVector};
use homoscale_bench::{one_scale_2d, two_scale_1d, two_scale_2d};

fn cell_solve(c: &mut Criterion) {
    let mut g = c.benchmark_group("cell_solve");
    for res in [16usize, 32, 64] {
        let a = one_scale_2d(res);
        g.bench_with_input(BenchmarkId::from_parameter(res), &a, |b, a| {
            b.iter(|| one_scale_corrector(black_box(a), &SolveOptions::default()).unwrap())
        });
    }
    g.finish();
}

fn corrector_build(c: &mut Criterion) {
    let mut g = c.benchmark_group("corrector_build");
    g.sample_size(10);
    let s = ScaleVector::new(vec![1.0, 1.0 / 16.0]).unwrap();
    let plan = choose_parameters(&s, &Calibration::default());
    for res in [32usize, 64] {
        let a = two_scale_1d(res);
        g.bench_with_input(BenchmarkId::new("d1", res), &a, |b, a| {
            b.iter(|| build_corrector(black_box(a), &s, &plan).unwrap())
        });
    }
    let plan = choose_parameters(&s, &Calibration::default().with_c_sep(0.25));
    let a = two_scale_2d(8);
    g.bench_with_input(BenchmarkId::new("d2", 8), &a, |b, a| {
        b.iter(|| build_corrector(black_box(a), &s, &plan).unwrap())
    });
    g.finish();
}

fn fine_solve(c: &mut Criterion) {
    let mut g = c.benchmark_group("fine_1d");
    for eps in [1e-2, 1e-3, 1e-4] {
        let a = Arc::new(move |x: f64| 3.0 + (2.0 * std::f64::consts::PI * x / eps).sin());
        g.bench_with_input(BenchmarkId::from_parameter(eps), &eps, |b, &eps| {
            b.iter(|| solve_fine_1d(a.clone(), black_box(eps), 1.0, 0.0, 0.0).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, cell_solve, corrector_build, fine_solve);
criterion_main!(benches);
