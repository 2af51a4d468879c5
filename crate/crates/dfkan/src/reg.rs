//! Dropout, batch normalization, and their ordered composition at the
//! pre- and post-activation regularization positions.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const DEFAULT_DROPOUT_P: f64 = 0.1;

/// Where the regularization sequence runs relative to the output activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegPlacement {
    None,
    PreOnly,
    PostOnly,
    Both,
}

impl RegPlacement {
    pub fn pre_active(&self) -> bool {
        matches!(self, RegPlacement::PreOnly | RegPlacement::Both)
    }

    pub fn post_active(&self) -> bool {
        matches!(self, RegPlacement::PostOnly | RegPlacement::Both)
    }
}

/// Order of dropout and batch normalization inside one position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegOrder {
    DropoutFirst,
    BatchNormFirst,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegConfig {
    pub placement: RegPlacement,
    pub order: RegOrder,
    pub use_dropout: bool,
    pub use_batchnorm: bool,
    pub dropout_p: f64,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            placement: RegPlacement::None,
            order: RegOrder::DropoutFirst,
            use_dropout: false,
            use_batchnorm: false,
            dropout_p: DEFAULT_DROPOUT_P,
        }
    }
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout probability must lie in [0, 1), got {}",
                self.dropout_p
            )));
        }
        Ok(())
    }

    /// Number of active batch-norm positions.
    pub fn bn_positions(&self) -> usize {
        if !self.use_batchnorm {
            return 0;
        }
        match self.placement {
            RegPlacement::None => 0,
            RegPlacement::PreOnly | RegPlacement::PostOnly => 1,
            RegPlacement::Both => 2,
        }
    }

    pub fn dropout_active_at(&self, position: RegPosition) -> bool {
        self.use_dropout && self.position_active(position)
    }

    pub fn batchnorm_active_at(&self, position: RegPosition) -> bool {
        self.use_batchnorm && self.position_active(position)
    }

    fn position_active(&self, position: RegPosition) -> bool {
        match position {
            RegPosition::Pre => self.placement.pre_active(),
            RegPosition::Post => self.placement.post_active(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegPosition {
    Pre,
    Post,
}

impl RegPosition {
    fn tag(&self) -> u64 {
        match self {
            RegPosition::Pre => 0,
            RegPosition::Post => 1,
        }
    }
}

/// Train or inference behaviour for the stochastic/stateful operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Learnable affine plus running statistics for one batch-norm position.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNormState {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: Tensor::filled(1, width, 1.0),
            beta: Tensor::zeros(1, width),
            running_mean: Tensor::zeros(1, width),
            running_var: Tensor::filled(1, width, 1.0),
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.cols()
    }
}

/// Deterministic per-(seed, layer, step, position) dropout stream.
pub fn dropout_rng(seed: u64, layer_index: usize, step: u64, position: RegPosition) -> impl Rng {
    rng::stream(seed, &[0xd09, layer_index as u64, step, position.tag()])
}

/// Inverted-scaling dropout. Train mode masks with Bernoulli(1-p) and
/// rescales by 1/(1-p); inference is the identity. The backward rule reuses
/// the forward mask, so gradients are zero exactly where activations were
/// dropped.
pub fn dropout(tape: &mut Tape, x: Var, p: f64, mode: Mode, rng: &mut impl Rng) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout p out of range: {p}")));
    }
    if mode == Mode::Infer || p == 0.0 {
        return Ok(x);
    }
    let xv = tape.value(x);
    let keep = 1.0 - p;
    let scale = 1.0 / keep;
    let mask: Vec<f64> = (0..xv.len())
        .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
        .collect();
    let mask = Tensor::new(xv.rows(), xv.cols(), mask)?;
    let out = Tensor::new(
        xv.rows(),
        xv.cols(),
        xv.data()
            .iter()
            .zip(mask.data())
            .map(|(&v, &m)| v * m)
            .collect(),
    )?;
    let mask_b = mask.clone();
    tape.custom_unary(x, out, "dropout", move |g, _| {
        Tensor::new(
            g.rows(),
            g.cols(),
            g.data()
                .iter()
                .zip(mask_b.data())
                .map(|(&gv, &m)| gv * m)
                .collect(),
        )
        .expect("mask shape matches")
    })
}

/// Batch normalization over the rows of an (batch x n) tensor.
///
/// Train mode normalizes by the batch mean and biased variance, applies the
/// learnable affine, and updates the running statistics in place. Inference
/// normalizes by the running statistics.
pub fn batchnorm(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    state: &mut BatchNormState,
    mode: Mode,
) -> Result<Var> {
    let xv = tape.value(x);
    let (batch, n) = xv.shape();
    if state.width() != n {
        return Err(Error::ShapeMismatch {
            op: "batchnorm",
            lhs: xv.shape(),
            rhs: state.gamma.shape(),
        });
    }
    match mode {
        Mode::Train => {
            if batch < 2 {
                return Err(Error::Config(format!(
                    "batch normalization in train mode needs a batch of at least 2, got {batch}"
                )));
            }
            let mut mean = vec![0.0; n];
            for r in 0..batch {
                for c in 0..n {
                    mean[c] += xv.get(r, c);
                }
            }
            for m in mean.iter_mut() {
                *m /= batch as f64;
            }
            let mut var = vec![0.0; n];
            for r in 0..batch {
                for c in 0..n {
                    let d = xv.get(r, c) - mean[c];
                    var[c] += d * d;
                }
            }
            for v in var.iter_mut() {
                *v /= batch as f64; // biased variance
            }

            for c in 0..n {
                let rm = (1.0 - BN_MOMENTUM) * state.running_mean.get(0, c) + BN_MOMENTUM * mean[c];
                let rv = (1.0 - BN_MOMENTUM) * state.running_var.get(0, c) + BN_MOMENTUM * var[c];
                state.running_mean.set(0, c, rm);
                state.running_var.set(0, c, rv);
            }

            let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let gv = tape.value(gamma);
            let bv = tape.value(beta);
            let mut xhat = Tensor::zeros(batch, n);
            let mut out = Tensor::zeros(batch, n);
            for r in 0..batch {
                for c in 0..n {
                    let h = (xv.get(r, c) - mean[c]) * inv_std[c];
                    xhat.set(r, c, h);
                    out.set(r, c, gv.get(0, c) * h + bv.get(0, c));
                }
            }

            let rule = move |g: &Tensor, ins: &[&Tensor], _: &Tensor| -> Result<Vec<Tensor>> {
                let gamma = ins[1];
                let (batch, n) = g.shape();
                let bf = batch as f64;
                let mut dgamma = Tensor::zeros(1, n);
                let mut dbeta = Tensor::zeros(1, n);
                let mut sum_dxhat = vec![0.0; n];
                let mut sum_dxhat_xhat = vec![0.0; n];
                for r in 0..batch {
                    for c in 0..n {
                        let gu = g.get(r, c);
                        let h = xhat.get(r, c);
                        dgamma.set(0, c, dgamma.get(0, c) + gu * h);
                        dbeta.set(0, c, dbeta.get(0, c) + gu);
                        let dxh = gu * gamma.get(0, c);
                        sum_dxhat[c] += dxh;
                        sum_dxhat_xhat[c] += dxh * h;
                    }
                }
                let mut dx = Tensor::zeros(batch, n);
                for r in 0..batch {
                    for c in 0..n {
                        let dxh = g.get(r, c) * gamma.get(0, c);
                        let h = xhat.get(r, c);
                        let v = inv_std[c] / bf
                            * (bf * dxh - sum_dxhat[c] - h * sum_dxhat_xhat[c]);
                        dx.set(r, c, v);
                    }
                }
                Ok(vec![dx, dgamma, dbeta])
            };
            tape.custom(&[x, gamma, beta], out, "batchnorm_train", Box::new(rule))
        }
        Mode::Infer => {
            let mean = state.running_mean.clone();
            let var = state.running_var.clone();
            let inv_std: Vec<f64> = var
                .data()
                .iter()
                .map(|&v| 1.0 / (v + BN_EPS).sqrt())
                .collect();
            let gv = tape.value(gamma);
            let bv = tape.value(beta);
            let mut out = Tensor::zeros(batch, n);
            let mut xhat = Tensor::zeros(batch, n);
            for r in 0..batch {
                for c in 0..n {
                    let h = (xv.get(r, c) - mean.get(0, c)) * inv_std[c];
                    xhat.set(r, c, h);
                    out.set(r, c, gv.get(0, c) * h + bv.get(0, c));
                }
            }
            let rule = move |g: &Tensor, ins: &[&Tensor], _: &Tensor| -> Result<Vec<Tensor>> {
                let gamma = ins[1];
                let (batch, n) = g.shape();
                let mut dx = Tensor::zeros(batch, n);
                let mut dgamma = Tensor::zeros(1, n);
                let mut dbeta = Tensor::zeros(1, n);
                for r in 0..batch {
                    for c in 0..n {
                        let gu = g.get(r, c);
                        dx.set(r, c, gu * gamma.get(0, c) * inv_std[c]);
                        dgamma.set(0, c, dgamma.get(0, c) + gu * xhat.get(r, c));
                        dbeta.set(0, c, dbeta.get(0, c) + gu);
                    }
                }
                Ok(vec![dx, dgamma, dbeta])
            };
            tape.custom(&[x, gamma, beta], out, "batchnorm_infer", Box::new(rule))
        }
    }
}

/// Identity of one regularization position within a layer forward pass,
/// carrying everything the stochastic stream derivation needs.
pub struct RegSlot<'a> {
    pub config: &'a RegConfig,
    pub position: RegPosition,
    pub bn: Option<(&'a mut BatchNormState, Var, Var)>,
    pub seed: u64,
    pub layer_index: usize,
    pub step: u64,
}

/// Apply the position's regularization sequence in the configured order.
/// Inactive components are skipped; an inactive position is the identity.
pub fn regseq(tape: &mut Tape, x: Var, slot: RegSlot<'_>, mode: Mode) -> Result<Var> {
    let dropout_on = slot.config.dropout_active_at(slot.position);
    let bn_on = slot.config.batchnorm_active_at(slot.position);
    let mut rng = dropout_rng(slot.seed, slot.layer_index, slot.step, slot.position);

    let mut v = x;
    match slot.config.order {
        RegOrder::DropoutFirst => {
            if dropout_on {
                v = dropout(tape, v, slot.config.dropout_p, mode, &mut rng)?;
            }
            if bn_on {
                let (state, gamma, beta) = slot.bn.ok_or_else(|| {
                    Error::Contract("batch norm enabled without a bound state".into())
                })?;
                v = batchnorm(tape, v, gamma, beta, state, mode)?;
            }
        }
        RegOrder::BatchNormFirst => {
            if bn_on {
                let (state, gamma, beta) = slot.bn.ok_or_else(|| {
                    Error::Contract("batch norm enabled without a bound state".into())
                })?;
                v = batchnorm(tape, v, gamma, beta, state, mode)?;
            }
            if dropout_on {
                v = dropout(tape, v, slot.config.dropout_p, mode, &mut rng)?;
            }
        }
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dropout_p_zero_is_exact_identity() {
        let mut tape = Tape::new();
        let x0 = Tensor::from_rows(&[vec![1.0, -2.0], vec![3.0, 4.0]]).unwrap();
        let x = tape.leaf(x0.clone(), false);
        let mut rng = dropout_rng(1, 0, 0, RegPosition::Pre);
        let y = dropout(&mut tape, x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(tape.value(y), &x0);
    }

    #[test]
    fn dropout_infer_is_identity_for_any_p() {
        let mut tape = Tape::new();
        let x0 = Tensor::row(&[5.0, 6.0, 7.0]);
        let x = tape.leaf(x0.clone(), false);
        let mut rng = dropout_rng(1, 0, 0, RegPosition::Pre);
        let y = dropout(&mut tape, x, 0.9, Mode::Infer, &mut rng).unwrap();
        assert_eq!(tape.value(y), &x0);
    }

    #[test]
    fn dropout_expectation_is_preserved() {
        // mean over 1e5 masked outputs of x = 1 at p = 0.5 stays within 1%.
        let mut rng = dropout_rng(42, 0, 0, RegPosition::Pre);
        let n = 100_000;
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(n, 1, 1.0), false);
        let y = dropout(&mut tape, x, 0.5, Mode::Train, &mut rng).unwrap();
        let mean = tape.value(y).data().iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean was {mean}");
    }

    #[test]
    fn dropout_gradient_is_zero_exactly_where_masked() {
        let mut rng = dropout_rng(7, 2, 3, RegPosition::Post);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(32, 4, 2.0), true);
        let y = dropout(&mut tape, x, 0.4, Mode::Train, &mut rng).unwrap();
        let l = tape.reduce_sum(y).unwrap();
        let grads = tape.backward(l).unwrap();
        let yv = tape.value(y).clone();
        let g = &grads[&x.id()];
        for i in 0..yv.len() {
            if yv.data()[i] == 0.0 {
                assert_eq!(g.data()[i], 0.0);
            } else {
                assert!(g.data()[i] > 0.0);
            }
        }
    }

    #[test]
    fn batchnorm_symmetric_two_point_batch() {
        let mut state = BatchNormState::new(1);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![1.0], vec![3.0]]).unwrap(), false);
        let gamma = tape.leaf(state.gamma.clone(), false);
        let beta = tape.leaf(state.beta.clone(), false);
        let y = batchnorm(&mut tape, x, gamma, beta, &mut state, Mode::Train).unwrap();
        let out = tape.value(y);
        // mean 2, biased var 1, so +-1 shrunk slightly by eps
        let expect = 1.0 / (1.0 + BN_EPS).sqrt();
        assert!((out.get(0, 0) + expect).abs() < 1e-12);
        assert!((out.get(1, 0) - expect).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_gamma_zero_gives_beta() {
        let mut state = BatchNormState::new(2);
        state.gamma = Tensor::zeros(1, 2);
        state.beta = Tensor::row(&[0.5, -1.5]);
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -4.0], vec![0.0, 0.5]]).unwrap(),
            false,
        );
        let gamma = tape.leaf(state.gamma.clone(), false);
        let beta = tape.leaf(state.beta.clone(), false);
        let y = batchnorm(&mut tape, x, gamma, beta, &mut state, Mode::Train).unwrap();
        for r in 0..3 {
            assert_eq!(tape.value(y).get(r, 0), 0.5);
            assert_eq!(tape.value(y).get(r, 1), -1.5);
        }
    }

    #[test]
    fn batchnorm_normalizes_random_batch() {
        use rand::Rng;
        let mut rng = crate::rng::stream(11, &[99]);
        let mut data = Vec::with_capacity(64 * 8);
        for _ in 0..64 * 8 {
            data.push(rng.random_range(-3.0..5.0));
        }
        let x0 = Tensor::new(64, 8, data).unwrap();
        let mut state = BatchNormState::new(8);
        let mut tape = Tape::new();
        let x = tape.leaf(x0, false);
        let gamma = tape.leaf(state.gamma.clone(), false);
        let beta = tape.leaf(state.beta.clone(), false);
        let y = batchnorm(&mut tape, x, gamma, beta, &mut state, Mode::Train).unwrap();
        let out = tape.value(y);
        for c in 0..8 {
            let mut mean = 0.0;
            for r in 0..64 {
                mean += out.get(r, c);
            }
            mean /= 64.0;
            let mut var = 0.0;
            for r in 0..64 {
                var += (out.get(r, c) - mean).powi(2);
            }
            var /= 64.0;
            assert!(mean.abs() <= 1e-9, "post-BN mean {mean}");
            assert!((1.0 - 1e-4..=1.0).contains(&var), "post-BN var {var}");
        }
    }

    #[test]
    fn batchnorm_rejects_batch_of_one_in_train_mode() {
        let mut state = BatchNormState::new(2);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[1.0, 2.0]), false);
        let gamma = tape.leaf(state.gamma.clone(), false);
        let beta = tape.leaf(state.beta.clone(), false);
        assert!(batchnorm(&mut tape, x, gamma, beta, &mut state, Mode::Train).is_err());
    }

    #[test]
    fn batchnorm_running_stats_update_only_in_train_mode() {
        let mut state = BatchNormState::new(1);
        let x0 = Tensor::from_rows(&[vec![2.0], vec![6.0]]).unwrap();

        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), false);
        let gamma = tape.leaf(state.gamma.clone(), false);
        let beta = tape.leaf(state.beta.clone(), false);
        batchnorm(&mut tape, x, gamma, beta, &mut state, Mode::Infer).unwrap();
        assert_eq!(state.running_mean.get(0, 0), 0.0);
        assert_eq!(state.running_var.get(0, 0), 1.0);

        let mut tape = Tape::new();
        let x = tape.leaf(x0, false);
        let gamma = tape.leaf(state.gamma.clone(), false);
        let beta = tape.leaf(state.beta.clone(), false);
        batchnorm(&mut tape, x, gamma, beta, &mut state, Mode::Train).unwrap();
        // batch mean 4, biased var 4, momentum 0.1
        assert!((state.running_mean.get(0, 0) - 0.4).abs() < 1e-12);
        assert!((state.running_var.get(0, 0) - (0.9 + 0.4)).abs() < 1e-12);
    }

    #[test]
    fn regseq_identity_when_everything_off() {
        let config = RegConfig::default();
        let mut tape = Tape::new();
        let x0 = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let x = tape.leaf(x0.clone(), false);
        let slot = RegSlot {
            config: &config,
            position: RegPosition::Pre,
            bn: None,
            seed: 0,
            layer_index: 0,
            step: 0,
        };
        let y = regseq(&mut tape, x, slot, Mode::Train).unwrap();
        assert_eq!(tape.value(y), &x0);
    }

    #[test]
    fn regseq_orderings_differ_with_nonzero_beta() {
        // With a pinned mask (deterministic stream) and beta != 0 the two
        // orderings disagree on a 4x2 batch.
        let x0 = Tensor::from_rows(&[
            vec![1.0, -0.5],
            vec![2.0, 0.5],
            vec![-1.0, 1.5],
            vec![0.5, -2.0],
        ])
        .unwrap();
        let run = |order: RegOrder| -> Tensor {
            let config = RegConfig {
                placement: RegPlacement::PreOnly,
                order,
                use_dropout: true,
                use_batchnorm: true,
                dropout_p: 0.5,
            };
            let mut state = BatchNormState::new(2);
            state.beta = Tensor::row(&[1.0, -1.0]);
            let mut tape = Tape::new();
            let x = tape.leaf(x0.clone(), false);
            let gamma = tape.leaf(state.gamma.clone(), false);
            let beta = tape.leaf(state.beta.clone(), false);
            let slot = RegSlot {
                config: &config,
                position: RegPosition::Pre,
                bn: Some((&mut state, gamma, beta)),
                seed: 5,
                layer_index: 1,
                step: 2,
            };
            let y = regseq(&mut tape, x, slot, Mode::Train).unwrap();
            tape.value(y).clone()
        };
        let a = run(RegOrder::DropoutFirst);
        let b = run(RegOrder::BatchNormFirst);
        assert_ne!(a, b);
    }

    #[test]
    fn regseq_dropout_first_with_p_zero_equals_bn_alone() {
        let x0 = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 0.0], vec![-1.0, 1.0]]).unwrap();
        let bn_alone = {
            let mut state = BatchNormState::new(2);
            let mut tape = Tape::new();
            let x = tape.leaf(x0.clone(), false);
            let gamma = tape.leaf(state.gamma.clone(), false);
            let beta = tape.leaf(state.beta.clone(), false);
            let y = batchnorm(&mut tape, x, gamma, beta, &mut state, Mode::Train).unwrap();
            tape.value(y).clone()
        };
        let seq = {
            let config = RegConfig {
                placement: RegPlacement::PreOnly,
                order: RegOrder::DropoutFirst,
                use_dropout: true,
                use_batchnorm: true,
                dropout_p: 0.0,
            };
            let mut state = BatchNormState::new(2);
            let mut tape = Tape::new();
            let x = tape.leaf(x0, false);
            let gamma = tape.leaf(state.gamma.clone(), false);
            let beta = tape.leaf(state.beta.clone(), false);
            let slot = RegSlot {
                config: &config,
                position: RegPosition::Pre,
                bn: Some((&mut state, gamma, beta)),
                seed: 9,
                layer_index: 0,
                step: 0,
            };
            let y = regseq(&mut tape, x, slot, Mode::Train).unwrap();
            tape.value(y).clone()
        };
        assert_eq!(bn_alone, seq);
    }

    #[test]
    fn pre_and_post_positions_draw_independent_masks() {
        let draw = |position: RegPosition| -> Vec<f64> {
            let mut rng = dropout_rng(3, 1, 5, position);
            (0..16).map(|_| rng.random::<f64>()).collect()
        };
        assert_ne!(draw(RegPosition::Pre), draw(RegPosition::Post));
    }
}
