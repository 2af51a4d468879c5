//! Finite-difference gradient verification over whole models.
//!
//! The oracle route is independent of the backward pass: it re-runs the
//! forward computation at perturbed parameter values and compares central
//! differences against the tape's analytic gradients, grouped by parameter
//! path.

use crate::error::Result;
use crate::model::Model;
use crate::optim::mse_on_tape;
use crate::reg::Mode;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const GRADCHECK_H: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-5;

/// Relative error with the `max(1, |a|, |b|)` normalization.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

#[derive(Debug, Clone)]
pub struct GroupReport {
    pub group: String,
    pub scalars: usize,
    pub worst_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub groups: Vec<GroupReport>,
}

impl GradcheckReport {
    pub fn worst(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.worst_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.worst() <= tol
    }
}

fn loss_of(model: &Model, x: &Tensor, y: &Tensor) -> Result<f64> {
    let mut scratch = model.clone();
    let mut tape = Tape::new();
    let bound = scratch.bind(&mut tape, false);
    let xv = tape.leaf(x.clone(), false);
    let yv = tape.leaf(y.clone(), false);
    let pred = scratch.forward_on_tape(&mut tape, &bound, xv, Mode::Train, 0, 0)?;
    let loss = mse_on_tape(&mut tape, pred, yv)?;
    Ok(tape.value(loss).item())
}

/// Compare analytic gradients of `mean((model(x) - y)^2)` against central
/// finite differences for every learnable scalar. Dropout is forced off
/// (its masks are not a fixed function under perturbation); batch norm runs
/// in train mode so the batch-statistics path is exercised.
pub fn gradcheck_model(model: &Model, x: &Tensor, y: &Tensor, h: f64) -> Result<GradcheckReport> {
    let mut base = model.clone();
    for layer in &mut base.config.layers {
        layer.reg.use_dropout = false;
    }

    // Analytic gradients in walk order.
    let mut work = base.clone();
    let mut tape = Tape::new();
    let bound = work.bind(&mut tape, true);
    let xv = tape.leaf(x.clone(), false);
    let yv = tape.leaf(y.clone(), false);
    let pred = work.forward_on_tape(&mut tape, &bound, xv, Mode::Train, 0, 0)?;
    let loss = mse_on_tape(&mut tape, pred, yv)?;
    let grad_map = tape.backward(loss)?;
    let walk = bound.walk_vars();
    let analytic: Vec<Vec<f64>> = walk
        .iter()
        .map(|v| {
            grad_map
                .get(&v.id())
                .map(|t| t.data().to_vec())
                .unwrap_or_else(|| vec![0.0; tape.value(*v).len()])
        })
        .collect();

    let mut names = Vec::new();
    base.visit_params(&mut |path, _| names.push(path.to_string()));

    let flat = base.flat_params();
    let mut offsets = Vec::new();
    let mut off = 0;
    base.visit_params(&mut |_, t| {
        offsets.push(off);
        off += t.len();
    });

    let mut groups = Vec::new();
    for (gi, name) in names.iter().enumerate() {
        let n = analytic[gi].len();
        let mut worst: f64 = 0.0;
        for j in 0..n {
            let idx = offsets[gi] + j;
            let mut plus = flat.clone();
            plus[idx] += h;
            let mut minus = flat.clone();
            minus[idx] -= h;
            let mut mp = base.clone();
            mp.set_flat_params(&plus)?;
            let mut mm = base.clone();
            mm.set_flat_params(&minus)?;
            let fd = (loss_of(&mp, x, y)? - loss_of(&mm, x, y)?) / (2.0 * h);
            worst = worst.max(rel_err(analytic[gi][j], fd));
        }
        groups.push(GroupReport {
            group: name.clone(),
            scalars: n,
            worst_rel_err: worst,
        });
    }
    Ok(GradcheckReport { groups })
}
