#![allow(clippy::needless_range_loop)]
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dfkan::basis::{eval_basis_into, EvalScratch};
use dfkan::{BasisFamily, BasisSpec};

fn bench_basis_families(c: &mut Criterion) {
    let specs: Vec<(&str, BasisSpec, Vec<f64>)> = vec![
        (
            "standard_poly",
            BasisSpec::new(BasisFamily::StandardPoly, 8).unwrap(),
            vec![],
        ),
        (
            "legendre",
            BasisSpec::new(BasisFamily::Legendre, 8).unwrap(),
            vec![],
        ),
        (
            "chebyshev",
            BasisSpec::new(BasisFamily::Chebyshev, 8).unwrap(),
            vec![],
        ),
        ("bspline_k4_g8", BasisSpec::bspline(4, 8).unwrap(), vec![]),
        (
            "gaussian_rbf",
            BasisSpec::new(BasisFamily::GaussianRbf, 8).unwrap(),
            {
                let mut e = Vec::new();
                for k in 0..8 {
                    e.push(-1.0 + 2.0 * k as f64 / 7.0);
                }
                e.extend(std::iter::repeat_n(0.0, 8));
                e
            },
        ),
        (
            "sine",
            BasisSpec::new(BasisFamily::Sine, 8).unwrap(),
            (1..=8).map(|k| k as f64).chain(std::iter::repeat_n(0.0, 8)).collect(),
        ),
        (
            "rational_5_3",
            BasisSpec::rational(5, 3).unwrap(),
            vec![0.3, -0.2, 0.1],
        ),
    ];

    let mut group = c.benchmark_group("basis_eval");
    for (name, spec, extras) in &specs {
        let mut scratch = EvalScratch::new(spec);
        group.bench_with_input(BenchmarkId::from_parameter(name), spec, |b, spec| {
            b.iter(|| {
                let mut acc = 0.0;
                for i in 0..256 {
                    let u = -0.99 + 1.98 * i as f64 / 255.0;
                    eval_basis_into(spec, extras, black_box(u), &mut scratch);
                }
                acc += black_box(0.0);
                acc
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_basis_families);
criterion_main!(benches);
