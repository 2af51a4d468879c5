//! Gradient fidelity: analytic tape gradients against central finite
//! differences across strategies, bases, regularization paths, and whole
//! models.

mod common;

use common::{central_diff, random_tensor, rel_err};
use dfkan::gradcheck::{gradcheck_model, GRADCHECK_H, GRADCHECK_TOL};
use dfkan::layer::{InputStrategy, LayerConfig, OutputStrategy};
use dfkan::model::{AttentionInit, Model, ModelConfig};
use dfkan::reg::{BatchNormState, Mode, RegConfig, RegOrder, RegPlacement};
use dfkan::tape::Tape;
use dfkan::{BasisFamily, BasisSpec, FixedFn, Tensor};

fn single_layer_model(config: LayerConfig, seed: u64) -> Model {
    Model::build(ModelConfig {
        layers: vec![config],
        attention: AttentionInit::Off,
        seed,
    })
    .unwrap()
}

fn input_strategies(spec: &BasisSpec) -> Vec<InputStrategy> {
    vec![
        InputStrategy::None,
        InputStrategy::Fixed(FixedFn::Tanh),
        InputStrategy::Global(spec.clone()),
        InputStrategy::PerDimension(spec.clone()),
        InputStrategy::PerConnection(spec.clone()),
    ]
}

fn output_strategies(spec: &BasisSpec) -> Vec<OutputStrategy> {
    vec![
        OutputStrategy::None,
        OutputStrategy::Fixed(FixedFn::Sigmoid),
        OutputStrategy::Global(spec.clone()),
        OutputStrategy::PerDimension(spec.clone()),
    ]
}

/// Every (input strategy x output strategy) pair for three representative
/// families on a 3->4 layer.
#[test]
fn layer_gradcheck_over_strategy_grid() {
    let families = vec![
        BasisSpec::new(BasisFamily::Legendre, 4).unwrap(),
        BasisSpec::bspline(4, 5).unwrap(),
        BasisSpec::new(BasisFamily::GaussianRbf, 3).unwrap(),
    ];
    let x = random_tensor(6, 3, (-1.5, 1.5), 42);
    let y = random_tensor(6, 4, (-1.0, 1.0), 43);
    let mut seed = 900;
    for spec in &families {
        for input in input_strategies(spec) {
            for output in output_strategies(spec) {
                seed += 1;
                let config = LayerConfig::new(3, 4, input.clone(), output.clone());
                let model = single_layer_model(config, seed);
                let report = gradcheck_model(&model, &x, &y, GRADCHECK_H).unwrap();
                assert!(
                    report.passed(GRADCHECK_TOL),
                    "family {} input {:?} output {:?}: worst {}",
                    spec.family.name(),
                    input,
                    output,
                    report.worst()
                );
            }
        }
    }
}

/// Batch normalization gradients through gamma, beta, and x, including the
/// batch-variance path (train mode).
#[test]
fn batchnorm_gradcheck() {
    let x0 = random_tensor(8, 3, (-2.0, 2.0), 7);
    let gamma0 = random_tensor(1, 3, (0.5, 1.5), 8);
    let beta0 = random_tensor(1, 3, (-0.5, 0.5), 9);

    let loss_of = |x: &Tensor, g: &Tensor, b: &Tensor| -> f64 {
        let mut state = BatchNormState::new(3);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let gv = tape.leaf(g.clone(), true);
        let bv = tape.leaf(b.clone(), true);
        let y = dfkan::reg::batchnorm(&mut tape, xv, gv, bv, &mut state, Mode::Train).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let l = tape.reduce_mean(sq).unwrap();
        tape.value(l).item()
    };

    let mut state = BatchNormState::new(3);
    let mut tape = Tape::new();
    let xv = tape.leaf(x0.clone(), true);
    let gv = tape.leaf(gamma0.clone(), true);
    let bv = tape.leaf(beta0.clone(), true);
    let y = dfkan::reg::batchnorm(&mut tape, xv, gv, bv, &mut state, Mode::Train).unwrap();
    let sq = tape.mul(y, y).unwrap();
    let l = tape.reduce_mean(sq).unwrap();
    let grads = tape.backward(l).unwrap();

    let h = 1e-5;
    for (var, base, f) in [
        (xv, &x0, 0usize),
        (gv, &gamma0, 1),
        (bv, &beta0, 2),
    ] {
        let analytic = &grads[&var.id()];
        for idx in 0..base.len() {
            let fd = central_diff(
                |v| {
                    let mut t = base.clone();
                    t.data_mut()[idx] = v;
                    match f {
                        0 => loss_of(&t, &gamma0, &beta0),
                        1 => loss_of(&x0, &t, &beta0),
                        _ => loss_of(&x0, &gamma0, &t),
                    }
                },
                base.data()[idx],
                h,
            );
            assert!(
                rel_err(analytic.data()[idx], fd) <= 1e-5,
                "bn input {f} idx {idx}"
            );
        }
    }
}

/// End-to-end gradcheck of a 3->4->1 hybrid: per-dimension Legendre inputs,
/// global Chebyshev output, batch norm at the pre position, dropout off.
#[test]
fn hybrid_model_end_to_end_gradcheck() {
    let legendre = BasisSpec::new(BasisFamily::Legendre, 4).unwrap();
    let chebyshev = BasisSpec::new(BasisFamily::Chebyshev, 4).unwrap();
    let mut l0 = LayerConfig::new(
        3,
        4,
        InputStrategy::PerDimension(legendre),
        OutputStrategy::Global(chebyshev),
    );
    l0.reg = RegConfig {
        placement: RegPlacement::PreOnly,
        order: RegOrder::DropoutFirst,
        use_dropout: false,
        use_batchnorm: true,
        dropout_p: 0.0,
    };
    let l1 = LayerConfig::new(4, 1, InputStrategy::None, OutputStrategy::None);
    let model = Model::build(ModelConfig {
        layers: vec![l0, l1],
        attention: AttentionInit::Uniform,
        seed: 5,
    })
    .unwrap();
    let x = random_tensor(8, 3, (-1.0, 1.0), 50);
    let y = random_tensor(8, 1, (-1.0, 1.0), 51);
    let report = gradcheck_model(&model, &x, &y, GRADCHECK_H).unwrap();
    assert!(
        report.passed(GRADCHECK_TOL),
        "worst {} in {:?}",
        report.worst(),
        report
            .groups
            .iter()
            .max_by(|a, b| a.worst_rel_err.partial_cmp(&b.worst_rel_err).unwrap())
            .map(|g| g.group.clone())
    );
}

/// Primitive tape ops at 20+ random points each.
#[test]
fn primitive_ops_gradcheck_at_random_points() {
    let h = 1e-5;
    for trial in 0..20 {
        let seed = 1000 + trial;
        let a0 = random_tensor(3, 4, (-2.0, 2.0), seed);
        let b0 = random_tensor(4, 2, (-2.0, 2.0), seed + 500);
        let c0 = random_tensor(3, 2, (-2.0, 2.0), seed + 900);
        let bias0 = random_tensor(1, 2, (-1.0, 1.0), seed + 1300);

        // loss = mean((A.B + bias) * C) exercises matmul, add_row, mul, mean.
        let loss_of = |a: &Tensor, b: &Tensor, c: &Tensor, bias: &Tensor| -> f64 {
            let mut tape = Tape::new();
            let av = tape.leaf(a.clone(), true);
            let bv = tape.leaf(b.clone(), true);
            let cv = tape.leaf(c.clone(), true);
            let biasv = tape.leaf(bias.clone(), true);
            let p = tape.matmul(av, bv).unwrap();
            let p = tape.add_row(p, biasv).unwrap();
            let q = tape.mul(p, cv).unwrap();
            let l = tape.reduce_mean(q).unwrap();
            tape.value(l).item()
        };

        let mut tape = Tape::new();
        let av = tape.leaf(a0.clone(), true);
        let bv = tape.leaf(b0.clone(), true);
        let cv = tape.leaf(c0.clone(), true);
        let biasv = tape.leaf(bias0.clone(), true);
        let p = tape.matmul(av, bv).unwrap();
        let p = tape.add_row(p, biasv).unwrap();
        let q = tape.mul(p, cv).unwrap();
        let l = tape.reduce_mean(q).unwrap();
        let grads = tape.backward(l).unwrap();

        let checks: Vec<(dfkan::Var, Tensor, usize)> = vec![
            (av, a0.clone(), 0),
            (bv, b0.clone(), 1),
            (cv, c0.clone(), 2),
            (biasv, bias0.clone(), 3),
        ];
        for (var, base, which) in checks {
            let g = &grads[&var.id()];
            for idx in 0..base.len() {
                let fd = central_diff(
                    |v| {
                        let mut t = base.clone();
                        t.data_mut()[idx] = v;
                        match which {
                            0 => loss_of(&t, &b0, &c0, &bias0),
                            1 => loss_of(&a0, &t, &c0, &bias0),
                            2 => loss_of(&a0, &b0, &t, &bias0),
                            _ => loss_of(&a0, &b0, &c0, &t),
                        }
                    },
                    base.data()[idx],
                    h,
                );
                assert!(rel_err(g.data()[idx], fd) <= 1e-5);
            }
        }
    }
}

/// Negative control: a deliberately corrupted backward rule must be caught
/// by the finite-difference comparison.
#[test]
fn corrupted_backward_rule_is_detected() {
    let x0 = Tensor::row(&[1.3]);
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone(), true);
    // Forward x^2 but backward pretends the derivative is 3x.
    let bad = tape
        .custom_unary(x, x0.map(|v| v * v), "bad_square", |g, xv| {
            Tensor::new(
                g.rows(),
                g.cols(),
                g.data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &x)| 3.0 * x * gv)
                    .collect(),
            )
            .unwrap()
        })
        .unwrap();
    let l = tape.reduce_sum(bad).unwrap();
    let grads = tape.backward(l).unwrap();
    let analytic = grads[&x.id()].data()[0];
    let h = 1e-5;
    let fd = central_diff(|v| v * v, 1.3, h);
    assert!(
        rel_err(analytic, fd) > 1e-3,
        "corruption must be visible to the oracle"
    );
}

/// Dropout-enabled layers still gradcheck because the checker pins dropout off.
#[test]
fn gradcheck_pins_dropout_off() {
    let spec = BasisSpec::new(BasisFamily::Legendre, 3).unwrap();
    let mut config = LayerConfig::new(3, 2, InputStrategy::Global(spec), OutputStrategy::None);
    config.reg = RegConfig {
        placement: RegPlacement::Both,
        order: RegOrder::BatchNormFirst,
        use_dropout: true,
        use_batchnorm: true,
        dropout_p: 0.5,
    };
    let model = single_layer_model(config, 77);
    let x = random_tensor(8, 3, (-1.0, 1.0), 60);
    let y = random_tensor(8, 2, (-1.0, 1.0), 61);
    let report = gradcheck_model(&model, &x, &y, GRADCHECK_H).unwrap();
    assert!(report.passed(GRADCHECK_TOL), "worst {}", report.worst());
}
