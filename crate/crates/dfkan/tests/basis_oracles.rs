#![allow(clippy::needless_range_loop)]
//! Independent oracles for the basis families: explicit closed-form series
//! (no three-term recurrence anywhere on the oracle side), classical
//! identities, partition of unity, and finite-difference derivative checks.

mod common;

use common::{central_diff, random_tensor, rel_err};
use dfkan::basis::{batch_eval, eval_basis, eval_function, Assignment, BankLayout};
use dfkan::rng;
use dfkan::tape::Tape;
use dfkan::{BasisFamily, BasisSpec, DomainMap, Tensor};
use proptest::prelude::*;
use rand::Rng;

/// Rising factorial (a)_n = a (a+1) ... (a+n-1).
fn rising(a: f64, n: usize) -> f64 {
    (0..n).fold(1.0, |acc, k| acc * (a + k as f64))
}

/// Generalized binomial coefficient binom(a, k) with real a.
fn gen_binom(a: f64, k: usize) -> f64 {
    let mut num = 1.0;
    for i in 0..k {
        num *= a - i as f64;
    }
    let mut den = 1.0;
    for i in 1..=k {
        den *= i as f64;
    }
    num / den
}

fn factorial(n: usize) -> f64 {
    (1..=n).fold(1.0, |acc, k| acc * k as f64)
}

/// Explicit-series Gegenbauer oracle:
/// C_n^a(x) = sum_k (-1)^k (a)_{n-k} / (k! (n-2k)!) (2x)^{n-2k}.
fn gegenbauer_series(n: usize, alpha: f64, x: f64) -> f64 {
    let mut sum = 0.0;
    for k in 0..=n / 2 {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        sum += sign * rising(alpha, n - k) / (factorial(k) * factorial(n - 2 * k))
            * (2.0 * x).powi((n - 2 * k) as i32);
    }
    sum
}

/// Explicit-sum Jacobi oracle:
/// P_n^{(a,b)}(x) = sum_s binom(n+a, n-s) binom(n+b, s) ((x-1)/2)^s ((x+1)/2)^{n-s}.
fn jacobi_series(n: usize, a: f64, b: f64, x: f64) -> f64 {
    let mut sum = 0.0;
    for s in 0..=n {
        sum += gen_binom(n as f64 + a, n - s)
            * gen_binom(n as f64 + b, s)
            * ((x - 1.0) / 2.0).powi(s as i32)
            * ((x + 1.0) / 2.0).powi((n - s) as i32);
    }
    sum
}

/// Hardcoded Legendre closed forms through degree 6.
fn legendre_closed(n: usize, x: f64) -> f64 {
    match n {
        0 => 1.0,
        1 => x,
        2 => (3.0 * x.powi(2) - 1.0) / 2.0,
        3 => (5.0 * x.powi(3) - 3.0 * x) / 2.0,
        4 => (35.0 * x.powi(4) - 30.0 * x.powi(2) + 3.0) / 8.0,
        5 => (63.0 * x.powi(5) - 70.0 * x.powi(3) + 15.0 * x) / 8.0,
        6 => (231.0 * x.powi(6) - 315.0 * x.powi(4) + 105.0 * x.powi(2) - 5.0) / 16.0,
        _ => unreachable!(),
    }
}

/// Hardcoded Chebyshev closed forms through degree 6.
fn chebyshev_closed(n: usize, x: f64) -> f64 {
    match n {
        0 => 1.0,
        1 => x,
        2 => 2.0 * x.powi(2) - 1.0,
        3 => 4.0 * x.powi(3) - 3.0 * x,
        4 => 8.0 * x.powi(4) - 8.0 * x.powi(2) + 1.0,
        5 => 16.0 * x.powi(5) - 20.0 * x.powi(3) + 5.0 * x,
        6 => 32.0 * x.powi(6) - 48.0 * x.powi(4) + 18.0 * x.powi(2) - 1.0,
        _ => unreachable!(),
    }
}

fn hundred_points(seed: u64) -> Vec<f64> {
    let mut rng = rng::stream(seed, &[0xba5]);
    (0..100).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn legendre_matches_series_oracle() {
    let spec = BasisSpec::new(BasisFamily::Legendre, 7).unwrap();
    for u in hundred_points(1) {
        let (values, _) = eval_basis(&spec, &[], u);
        for n in 0..=6 {
            assert!(
                (values[n] - legendre_closed(n, u)).abs() < 1e-10,
                "P_{n}({u})"
            );
        }
    }
}

#[test]
fn chebyshev_matches_series_oracle() {
    let spec = BasisSpec::new(BasisFamily::Chebyshev, 7).unwrap();
    for u in hundred_points(2) {
        let (values, _) = eval_basis(&spec, &[], u);
        for n in 0..=6 {
            assert!(
                (values[n] - chebyshev_closed(n, u)).abs() < 1e-10,
                "T_{n}({u})"
            );
        }
    }
}

#[test]
fn gegenbauer_matches_series_oracle() {
    for &alpha in &[0.25, 0.5, 1.0, 1.75] {
        let spec = BasisSpec::new(BasisFamily::Gegenbauer { alpha }, 7).unwrap();
        for u in hundred_points(3) {
            let (values, _) = eval_basis(&spec, &[], u);
            for n in 0..=6 {
                assert!(
                    (values[n] - gegenbauer_series(n, alpha, u)).abs() < 1e-10,
                    "C_{n}^{alpha}({u})"
                );
            }
        }
    }
}

#[test]
fn jacobi_matches_series_oracle() {
    for &(alpha, beta) in &[(0.0, 0.0), (1.0, 1.0), (0.5, -0.5), (2.0, 0.25)] {
        let spec = BasisSpec::new(BasisFamily::Jacobi { alpha, beta }, 7).unwrap();
        for u in hundred_points(4) {
            let (values, _) = eval_basis(&spec, &[], u);
            for n in 0..=6 {
                assert!(
                    (values[n] - jacobi_series(n, alpha, beta, u)).abs() < 1e-10,
                    "P_{n}^({alpha},{beta})({u})"
                );
            }
        }
    }
}

#[test]
fn chebyshev_cosine_identity() {
    // T_n(cos t) = cos(n t)
    let spec = BasisSpec::new(BasisFamily::Chebyshev, 11).unwrap();
    let mut rng = rng::stream(5, &[0x1d]);
    for _ in 0..100 {
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (values, _) = eval_basis(&spec, &[], theta.cos());
        for n in 0..=10 {
            assert!(
                (values[n] - (n as f64 * theta).cos()).abs() < 1e-10,
                "T_{n}(cos {theta})"
            );
        }
    }
}

#[test]
fn gegenbauer_half_reduces_to_legendre() {
    let geg = BasisSpec::new(BasisFamily::Gegenbauer { alpha: 0.5 }, 8).unwrap();
    let leg = BasisSpec::new(BasisFamily::Legendre, 8).unwrap();
    for u in hundred_points(6) {
        let (g, _) = eval_basis(&geg, &[], u);
        let (p, _) = eval_basis(&leg, &[], u);
        for n in 0..8 {
            assert!((g[n] - p[n]).abs() < 1e-10);
        }
    }
}

#[test]
fn bspline_partition_of_unity_across_orders_and_grids() {
    let mut rng = rng::stream(7, &[0x90]);
    for &k in &[2usize, 3, 4] {
        for &g in &[4usize, 8, 17, 32] {
            let spec = BasisSpec::bspline(k, g).unwrap();
            for _ in 0..1000 {
                let u: f64 = rng.random_range(-1.0..1.0);
                let (values, _) = eval_basis(&spec, &[], u);
                let sum: f64 = values.iter().sum();
                assert!(
                    (sum - 1.0).abs() <= 1e-12,
                    "k={k} g={g} u={u} sum={sum}"
                );
            }
        }
    }
}

proptest! {
    #[test]
    fn bspline_partition_of_unity_property(
        k in 2usize..=4,
        g in 4usize..=32,
        u in -0.999f64..0.999,
    ) {
        let spec = BasisSpec::bspline(k, g).unwrap();
        let (values, _) = eval_basis(&spec, &[], u);
        let sum: f64 = values.iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn rational_denominator_never_below_one(
        b in prop::collection::vec(-10.0f64..10.0, 1..5),
        u in -5.0f64..5.0,
    ) {
        let spec = BasisSpec::rational(2, b.len()).unwrap();
        let (values, derivs) = eval_basis(&spec, &b, u);
        // 1/D <= 1 for the constant basis element (u^0 / D)
        prop_assert!(values[0] <= 1.0 + 1e-15);
        prop_assert!(values.iter().all(|v| v.is_finite()));
        prop_assert!(derivs.iter().all(|v| v.is_finite()));
    }
}

/// Every family's dB/du against central finite differences, keeping a
/// 1e-3 margin from clamp boundaries and B-spline knots.
#[test]
fn basis_derivatives_match_finite_differences() {
    let h = 1e-6;
    let mut rng = rng::stream(11, &[0xfd]);

    let specs: Vec<(BasisSpec, Vec<f64>)> = vec![
        (BasisSpec::new(BasisFamily::StandardPoly, 6).unwrap(), vec![]),
        (BasisSpec::new(BasisFamily::Legendre, 6).unwrap(), vec![]),
        (BasisSpec::new(BasisFamily::Chebyshev, 6).unwrap(), vec![]),
        (
            BasisSpec::new(BasisFamily::Gegenbauer { alpha: 1.0 }, 6).unwrap(),
            vec![],
        ),
        (
            BasisSpec::new(BasisFamily::Jacobi { alpha: 1.0, beta: 1.0 }, 6).unwrap(),
            vec![],
        ),
        (BasisSpec::bspline(4, 8).unwrap(), vec![]),
        (
            BasisSpec::new(BasisFamily::GaussianRbf, 3).unwrap(),
            vec![-0.8, 0.0, 0.8, 0.1, 0.1, 0.1],
        ),
        (
            BasisSpec::new(BasisFamily::Sine, 3).unwrap(),
            vec![1.0, 2.0, 3.0, 0.2, -0.4, 0.9],
        ),
        (BasisSpec::rational(3, 2).unwrap(), vec![0.7, -0.3]),
    ];

    for (spec, extras) in &specs {
        let knots = spec.knots().unwrap_or_default();
        let mut checked = 0;
        while checked < 40 {
            let u: f64 = rng.random_range(-0.99..0.99);
            if knots.iter().any(|t| (u - t).abs() < 1e-3) {
                continue;
            }
            checked += 1;
            let (_, derivs) = eval_basis(spec, extras, u);
            for k in 0..spec.order {
                let fd = central_diff(
                    |v| eval_basis(spec, extras, v).0[k],
                    u,
                    h,
                );
                assert!(
                    rel_err(derivs[k], fd) <= 1e-5,
                    "{} B_{k}'({u}): analytic {} vs fd {}",
                    spec.family.name(),
                    derivs[k],
                    fd
                );
            }
        }
    }
}

/// Full-function derivatives (input and every learnable scalar) against
/// finite differences, all families.
#[test]
fn function_scalar_derivatives_match_finite_differences() {
    let h = 1e-6;
    let mut rng = rng::stream(13, &[0xfe]);
    let specs = vec![
        BasisSpec::new(BasisFamily::StandardPoly, 4).unwrap(),
        BasisSpec::new(BasisFamily::Legendre, 4).unwrap(),
        BasisSpec::new(BasisFamily::GaussianRbf, 3).unwrap(),
        BasisSpec::new(BasisFamily::Sine, 3).unwrap(),
        BasisSpec::rational(2, 2).unwrap(),
    ];
    for spec in &specs {
        let m = spec.order;
        let extras_len = spec.extras_len();
        for trial in 0..20 {
            let coeffs: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let extras: Vec<f64> = match spec.family {
                BasisFamily::GaussianRbf => (0..extras_len)
                    .map(|i| {
                        if i < m {
                            rng.random_range(-1.0..1.0)
                        } else {
                            rng.random_range(-0.5..0.5)
                        }
                    })
                    .collect(),
                _ => (0..extras_len).map(|_| rng.random_range(-1.0..1.0)).collect(),
            };
            let x: f64 = rng.random_range(-1.5..1.5);
            let ev = eval_function(spec, &coeffs, &extras, x);

            let fd_x = central_diff(|v| eval_function(spec, &coeffs, &extras, v).value, x, h);
            assert!(
                rel_err(ev.dx, fd_x) <= 1e-5,
                "{} trial {trial} d/dx",
                spec.family.name()
            );
            for k in 0..m {
                let fd = central_diff(
                    |v| {
                        let mut c = coeffs.clone();
                        c[k] = v;
                        eval_function(spec, &c, &extras, x).value
                    },
                    coeffs[k],
                    h,
                );
                assert!(rel_err(ev.dcoeffs[k], fd) <= 1e-5);
            }
            for q in 0..extras_len {
                let fd = central_diff(
                    |v| {
                        let mut e = extras.clone();
                        e[q] = v;
                        eval_function(spec, &coeffs, &e, x).value
                    },
                    extras[q],
                    h,
                );
                assert!(
                    rel_err(ev.dextras[q], fd) <= 1e-5,
                    "{} extras[{q}]",
                    spec.family.name()
                );
            }
        }
    }
}

/// Gradcheck of sum(batch_eval(X)) over a random 4x3 input for every
/// family, exercising gradients to X, coefficients, and extras.
#[test]
fn batch_eval_gradcheck_all_families() {
    let h = 1e-5;
    let specs = vec![
        BasisSpec::new(BasisFamily::StandardPoly, 4).unwrap(),
        BasisSpec::new(BasisFamily::Legendre, 5).unwrap(),
        BasisSpec::new(BasisFamily::Chebyshev, 4).unwrap(),
        BasisSpec::new(BasisFamily::Gegenbauer { alpha: 1.0 }, 4).unwrap(),
        BasisSpec::new(BasisFamily::Jacobi { alpha: 1.0, beta: 1.0 }, 4).unwrap(),
        BasisSpec::bspline(4, 6).unwrap(),
        BasisSpec::new(BasisFamily::GaussianRbf, 3).unwrap(),
        BasisSpec::new(BasisFamily::Sine, 3).unwrap(),
        BasisSpec::rational(2, 2).unwrap(),
    ];
    for (si, spec) in specs.iter().enumerate() {
        let seed = 100 + si as u64;
        let x0 = random_tensor(4, 3, (-1.2, 1.2), seed);
        let mut rng = rng::stream(seed, &[0xabc]);
        let mut coeffs0 = Tensor::zeros(3, spec.order);
        for v in coeffs0.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let extras_len = spec.extras_len();
        let extras0 = if extras_len == 0 {
            None
        } else {
            let mut e = Tensor::zeros(3, extras_len);
            for v in e.data_mut() {
                *v = rng.random_range(-0.8..0.8);
            }
            Some(e)
        };

        let loss_of = |x: &Tensor, c: &Tensor, e: Option<&Tensor>| -> f64 {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), true);
            let cv = tape.leaf(c.clone(), true);
            let ev = e.map(|e| tape.leaf(e.clone(), true));
            let out = batch_eval(&mut tape, spec, xv, cv, ev, Assignment::PerColumn).unwrap();
            let l = tape.reduce_sum(out).unwrap();
            tape.value(l).item()
        };

        // analytic
        let mut tape = Tape::new();
        let xv = tape.leaf(x0.clone(), true);
        let cv = tape.leaf(coeffs0.clone(), true);
        let ev = extras0.as_ref().map(|e| tape.leaf(e.clone(), true));
        let out = batch_eval(&mut tape, spec, xv, cv, ev, Assignment::PerColumn).unwrap();
        let l = tape.reduce_sum(out).unwrap();
        let grads = tape.backward(l).unwrap();

        let gx = &grads[&xv.id()];
        for idx in 0..x0.len() {
            let fd = central_diff(
                |v| {
                    let mut x = x0.clone();
                    x.data_mut()[idx] = v;
                    loss_of(&x, &coeffs0, extras0.as_ref())
                },
                x0.data()[idx],
                h,
            );
            assert!(
                rel_err(gx.data()[idx], fd) <= 1e-5,
                "{} dX[{idx}]",
                spec.family.name()
            );
        }
        let gc = &grads[&cv.id()];
        for idx in 0..coeffs0.len() {
            let fd = central_diff(
                |v| {
                    let mut c = coeffs0.clone();
                    c.data_mut()[idx] = v;
                    loss_of(&x0, &c, extras0.as_ref())
                },
                coeffs0.data()[idx],
                h,
            );
            assert!(rel_err(gc.data()[idx], fd) <= 1e-5);
        }
        if let (Some(e0), Some(ev)) = (&extras0, ev) {
            let ge = &grads[&ev.id()];
            for idx in 0..e0.len() {
                let fd = central_diff(
                    |v| {
                        let mut e = e0.clone();
                        e.data_mut()[idx] = v;
                        loss_of(&x0, &coeffs0, Some(&e))
                    },
                    e0.data()[idx],
                    h,
                );
                assert!(
                    rel_err(ge.data()[idx], fd) <= 1e-5,
                    "{} dextras[{idx}]",
                    spec.family.name()
                );
            }
        }
    }
}

/// The identity map is exact for functions configured as the identity
/// polynomial under every polynomial family.
#[test]
fn identity_polynomial_is_exact_under_tanh_free_domains() {
    for family in [
        BasisFamily::StandardPoly,
        BasisFamily::Legendre,
        BasisFamily::Chebyshev,
    ] {
        let spec = BasisSpec::new(family, 3).unwrap().with_domain(DomainMap::None);
        let coeffs = vec![0.0, 1.0, 0.0];
        for x in [-1.4, -0.3, 0.0, 0.9, 2.2] {
            let ev = eval_function(&spec, &coeffs, &[], x);
            assert!((ev.value - x).abs() < 1e-12);
        }
    }
    let _ = BankLayout::Global; // layout type is exercised in the layer suite
}
