//! Shared helpers for the integration suites.
#![allow(dead_code)]

use dfkan::rng;
use dfkan::Tensor;
use rand::Rng;

/// Relative error with the max(1, |a|, |b|) normalization.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// Deterministic random tensor with entries in `range`.
pub fn random_tensor(rows: usize, cols: usize, range: (f64, f64), seed: u64) -> Tensor {
    let mut rng = rng::stream(seed, &[0x7e5]);
    let mut t = Tensor::zeros(rows, cols);
    for v in t.data_mut() {
        *v = rng.random_range(range.0..range.1);
    }
    t
}

/// Central finite difference of a scalar function of one coordinate.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}
