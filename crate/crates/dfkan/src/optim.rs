//! Losses, metrics, SGD and Adam, and the deterministic mini-batch
//! training loop.

use std::time::Instant;

use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::reg::Mode;
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Mean squared error between equal-shaped tensors.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "mse",
            lhs: pred.shape(),
            rhs: target.shape(),
        });
    }
    if pred.is_empty() {
        return Err(Error::Config("mse over an empty tensor".into()));
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Differentiable MSE on the tape.
pub fn mse_on_tape(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    tape.reduce_mean(sq)
}

/// Coefficient of determination, `1 - SS_res / SS_tot`.
pub fn r2(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "r2",
            lhs: pred.shape(),
            rhs: target.shape(),
        });
    }
    let n = target.len() as f64;
    let mean = target.data().iter().sum::<f64>() / n;
    let ss_tot: f64 = target.data().iter().map(|&t| (t - mean) * (t - mean)).sum();
    if ss_tot <= 0.0 {
        return Err(Error::Config(
            "r2 is undefined for a constant target".into(),
        ));
    }
    let ss_res: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            Optimizer::Sgd { lr } | Optimizer::Adam { lr, .. } => *lr,
        }
    }
}

/// Per-tensor first/second moment state for Adam, aligned with the walk.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

/// One optimizer step over walk-ordered (tensor, gradient) pairs.
pub fn optimizer_step(
    optimizer: &Optimizer,
    state: &mut AdamState,
    tensors: &mut [(&str, &mut Tensor)],
    grads: &[Vec<f64>],
) -> Result<()> {
    if tensors.len() != grads.len() {
        return Err(Error::Contract(format!(
            "optimizer got {} gradients for {} tensors",
            grads.len(),
            tensors.len()
        )));
    }
    match optimizer {
        Optimizer::Sgd { lr } => {
            for ((_, t), g) in tensors.iter_mut().zip(grads) {
                for (p, gv) in t.data_mut().iter_mut().zip(g) {
                    *p -= lr * gv;
                }
            }
        }
        Optimizer::Adam {
            lr,
            beta1,
            beta2,
            eps,
        } => {
            if state.m.is_empty() {
                state.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
                state.v = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            }
            state.t += 1;
            let t = state.t as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            for (i, ((_, tensor), g)) in tensors.iter_mut().zip(grads).enumerate() {
                let m = &mut state.m[i];
                let v = &mut state.v[i];
                for (j, (p, &gv)) in tensor.data_mut().iter_mut().zip(g.iter()).enumerate() {
                    m[j] = beta1 * m[j] + (1.0 - beta1) * gv;
                    v[j] = beta2 * v[j] + (1.0 - beta2) * gv * gv;
                    let mhat = m[j] / bc1;
                    let vhat = v[j] / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub epochs: usize,
    /// 0 means full batch.
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
    /// L1 pull on the attention gate logits; a subgradient is added to the
    /// logit gradient so unsupported features decay toward uniform weight.
    pub attention_l1: f64,
    pub early_stop_patience: Option<usize>,
    /// Global-norm gradient clipping threshold; None disables.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::adam(1e-3),
            epochs: 3000,
            batch_size: 64,
            seed: 0,
            weight_decay: 0.0,
            attention_l1: 0.0,
            early_stop_patience: None,
            grad_clip: Some(10.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.optimizer.lr() <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.weight_decay < 0.0 || self.attention_l1 < 0.0 {
            return Err(Error::Config("penalty weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

/// Row-index sets of a deterministic train/validation/test split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seed-derived permutation split. Fractions must sum to 1.
pub fn split_indices(n: usize, fractions: (f64, f64, f64), seed: u64) -> Result<SplitIndices> {
    let (ft, fv, fs) = fractions;
    if ft < 0.0 || fv < 0.0 || fs < 0.0 || (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must be non-negative and sum to 1, got ({ft}, {fv}, {fs})"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = rng::stream(seed, &[0x5b117]);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    let n_train = (ft * n as f64).round() as usize;
    let n_val = ((fv * n as f64).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let train = idx[..n_train].to_vec();
    let val = idx[n_train..n_train + n_val].to_vec();
    let test = idx[n_train + n_val..].to_vec();
    Ok(SplitIndices { train, val, test })
}

fn signum_zero(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Train a model in place, returning the per-epoch history.
///
/// Shuffling, dropoutmasks, and initialization all derive from the config
/// seed, so identical inputs produce bit-identical results. Batch norm runs
/// in train mode during steps and inference mode for validation. With early
/// stopping enabled the best-validation parameters are restored at the end.
pub fn train(
    model: &mut Model,
    data: &Dataset,
    split: &SplitIndices,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if cfg.early_stop_patience.is_some() && split.val.is_empty() {
        return Err(Error::Config(
            "early stopping requires a non-empty validation split".into(),
        ));
    }

    let x_val = data.x.select_rows(&split.val);
    let y_val = data.y.select_rows(&split.val);

    let mut history = TrainHistory::default();
    let mut adam_state = AdamState::default();
    let mut step: u64 = 0;
    let mut best: Option<(f64, Model)> = None;
    let mut stale_epochs = 0usize;

    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        // Seed-derived shuffle of the training rows, fresh each epoch.
        let mut order = split.train.clone();
        let mut shuffle_rng = rng::stream(cfg.seed, &[0x50f, epoch as u64]);
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }
        let batch = if cfg.batch_size == 0 {
            order.len()
        } else {
            cfg.batch_size.min(order.len())
        };

        let mut loss_sum = 0.0;
        let mut loss_rows = 0usize;
        for chunk in order.chunks(batch) {
            let xb = data.x.select_rows(chunk);
            let yb = data.y.select_rows(chunk);
            let loss = train_step(model, &xb, &yb, cfg, &mut adam_state, step)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss became non-finite at epoch {epoch}, step {step}"
                )));
            }
            loss_sum += loss * chunk.len() as f64;
            loss_rows += chunk.len();
            step += 1;
        }
        let train_mse = loss_sum / loss_rows as f64;

        let val_mse = if split.val.is_empty() {
            None
        } else {
            let pred = model.predict(&x_val)?;
            Some(mse(&pred, &y_val)?)
        };

        history.epochs.push(EpochRecord {
            epoch,
            train_mse,
            val_mse,
            seconds: t0.elapsed().as_secs_f64(),
        });

        if let (Some(patience), Some(v)) = (cfg.early_stop_patience, val_mse) {
            let improved = best.as_ref().is_none_or(|(b, _)| v < *b);
            if improved {
                best = Some((v, model.clone()));
                stale_epochs = 0;
            } else {
                stale_epochs += 1;
                if stale_epochs >= patience {
                    break;
                }
            }
        }
    }

    if cfg.early_stop_patience.is_some() {
        if let Some((_, best_model)) = best {
            *model = best_model;
        }
    }
    Ok(history)
}

/// One optimization step on a batch; returns the batch loss.
fn train_step(
    model: &mut Model,
    xb: &Tensor,
    yb: &Tensor,
    cfg: &TrainConfig,
    adam_state: &mut AdamState,
    step: u64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let xv = tape.leaf(xb.clone(), false);
    let yv = tape.leaf(yb.clone(), false);
    let pred = model.forward_on_tape(&mut tape, &bound, xv, Mode::Train, cfg.seed, step)?;
    let loss = mse_on_tape(&mut tape, pred, yv)?;
    let loss_value = tape.value(loss).item();
    let mut grad_map = tape.backward(loss)?;

    // Gradients in walk order; parameters untouched by the loss get zeros.
    let walk = bound.walk_vars();
    let mut grads: Vec<Vec<f64>> = Vec::with_capacity(walk.len());
    for var in &walk {
        let shape_len = tape.value(*var).len();
        match grad_map.remove(&var.id()) {
            Some(g) => grads.push(g.data().to_vec()),
            None => grads.push(vec![0.0; shape_len]),
        }
    }

    // Collect mutable parameter tensors in the same walk order.
    let mut names: Vec<String> = Vec::new();
    model.visit_params(&mut |path, _| names.push(path.to_string()));
    debug_assert_eq!(names.len(), grads.len());

    // Weight decay and the attention-gate L1 subgradient act on gradients.
    // The gate logits are exempt from weight decay: decay pressure on the
    // weights is what migrates per-feature scale into the gate, which is
    // what makes the learned attention informative.
    let mut flat_params: Vec<Vec<f64>> = Vec::with_capacity(names.len());
    model.visit_params(&mut |_, t| flat_params.push(t.data().to_vec()));
    for (i, name) in names.iter().enumerate() {
        let is_gate = name == "attention.logits";
        if cfg.weight_decay > 0.0 && !is_gate {
            for (g, p) in grads[i].iter_mut().zip(&flat_params[i]) {
                *g += cfg.weight_decay * p;
            }
        }
        if cfg.attention_l1 > 0.0 && is_gate {
            for (g, p) in grads[i].iter_mut().zip(&flat_params[i]) {
                *g += cfg.attention_l1 * signum_zero(*p);
            }
        }
    }

    if let Some(clip) = cfg.grad_clip {
        let norm: f64 = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        if norm > clip {
            let scale = clip / norm;
            for g in grads.iter_mut() {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
        }
    }

    // Apply the update through the mutable walk.
    let mut idx = 0;
    let mut err: Option<Error> = None;
    let optimizer = cfg.optimizer;
    // Adam state must align with the walk; update scalar-by-scalar.
    match optimizer {
        Optimizer::Sgd { lr } => {
            model.visit_params_mut(&mut |_, t| {
                let g = &grads[idx];
                for (p, gv) in t.data_mut().iter_mut().zip(g) {
                    *p -= lr * gv;
                }
                idx += 1;
            });
        }
        Optimizer::Adam {
            lr,
            beta1,
            beta2,
            eps,
        } => {
            if adam_state.m.is_empty() {
                adam_state.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
                adam_state.v = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            }
            adam_state.t += 1;
            let t = adam_state.t as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            let m_all = &mut adam_state.m;
            let v_all = &mut adam_state.v;
            model.visit_params_mut(&mut |_, tensor| {
                if m_all[idx].len() != tensor.len() {
                    err = Some(Error::Contract(
                        "optimizer state misaligned with parameter walk".into(),
                    ));
                    return;
                }
                let g = &grads[idx];
                let m = &mut m_all[idx];
                let v = &mut v_all[idx];
                for (j, (p, &gv)) in tensor.data_mut().iter_mut().zip(g.iter()).enumerate() {
                    m[j] = beta1 * m[j] + (1.0 - beta1) * gv;
                    v[j] = beta2 * v[j] + (1.0 - beta2) * gv * gv;
                    let mhat = m[j] / bc1;
                    let vhat = v[j] / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                }
                idx += 1;
            });
        }
    }
    if let Some(e) = err {
        return Err(e);
    }
    Ok(loss_value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_examples() {
        let a = Tensor::row(&[1.0, 2.0]);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(
            mse(&Tensor::row(&[0.0, 0.0]), &Tensor::row(&[1.0, 1.0])).unwrap(),
            1.0
        );
        assert_eq!(
            mse(&Tensor::row(&[1.0, 2.0]), &Tensor::row(&[3.0, 2.0])).unwrap(),
            2.0
        );
        assert!(mse(&Tensor::row(&[1.0]), &Tensor::row(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn r2_examples() {
        let target = Tensor::row(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(r2(&target, &target).unwrap(), 1.0);
        let mean_pred = Tensor::row(&[2.5, 2.5, 2.5, 2.5]);
        assert_eq!(r2(&mean_pred, &target).unwrap(), 0.0);
        let bad = Tensor::row(&[4.0, 1.0, 4.0, 1.0]);
        assert!(r2(&bad, &target).unwrap() < 0.0);
        let constant = Tensor::row(&[5.0, 5.0, 5.0, 5.0]);
        assert!(r2(&mean_pred, &constant).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_roughly_lr() {
        let optimizer = Optimizer::adam(0.01);
        let mut state = AdamState::default();
        let mut t = Tensor::scalar(1.0);
        let grads = vec![vec![2.0]];
        let mut tensors: Vec<(&str, &mut Tensor)> = vec![("p", &mut t)];
        optimizer_step(&optimizer, &mut state, &mut tensors, &grads).unwrap();
        let delta = t.item() - 1.0;
        assert!((delta + 0.01).abs() < 1e-6, "delta {delta}");
    }

    #[test]
    fn adam_zero_gradient_leaves_params_unchanged() {
        let optimizer = Optimizer::adam(0.1);
        let mut state = AdamState::default();
        let mut t = Tensor::row(&[1.0, -2.0]);
        let grads = vec![vec![0.0, 0.0]];
        let mut tensors: Vec<(&str, &mut Tensor)> = vec![("p", &mut t)];
        optimizer_step(&optimizer, &mut state, &mut tensors, &grads).unwrap();
        optimizer_step(&optimizer, &mut state, &mut tensors, &grads).unwrap();
        assert_eq!(t.data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let optimizer = Optimizer::adam(0.05);
            let mut state = AdamState::default();
            let mut t = Tensor::row(&[0.5, -0.25]);
            for s in 0..10 {
                let g = vec![vec![0.1 * s as f64, -0.2]];
                let mut tensors: Vec<(&str, &mut Tensor)> = vec![("p", &mut t)];
                optimizer_step(&optimizer, &mut state, &mut tensors, &g).unwrap();
            }
            t.data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn split_fractions_must_sum_to_one() {
        assert!(split_indices(10, (0.5, 0.2, 0.2), 0).is_err());
        let s = split_indices(100, (0.7, 0.15, 0.15), 1).unwrap();
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 100);
        assert_eq!(s.train.len(), 70);
        let s2 = split_indices(100, (0.7, 0.15, 0.15), 1).unwrap();
        assert_eq!(s, s2);
    }

    #[test]
    fn epochs_zero_rejected() {
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
