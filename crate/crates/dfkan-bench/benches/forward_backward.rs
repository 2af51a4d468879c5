use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dfkan::data::gen_by_name;
use dfkan::model::{preset_hybrid, preset_mlp, preset_vanilla_kan, Model, ModelConfig};
use dfkan::optim::{mse_on_tape, split_indices, train, Optimizer, TrainConfig};
use dfkan::reg::Mode;
use dfkan::rng;
use dfkan::tape::Tape;
use dfkan::{FixedFn, Tensor};
use rand::Rng;

fn random_batch(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = rng::stream(seed, &[0xbe]);
    let mut t = Tensor::zeros(rows, cols);
    for v in t.data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    t
}

fn presets() -> Vec<(&'static str, ModelConfig)> {
    vec![
        ("mlp_4_16_1", preset_mlp(&[4, 16, 1], FixedFn::Tanh, 1).unwrap()),
        (
            "vanilla_kan_4_8_1",
            preset_vanilla_kan(&[4, 8, 1], 4, 5, 1).unwrap(),
        ),
        ("hybrid_4_8_1", preset_hybrid(&[4, 8, 1], 5, 1).unwrap()),
    ]
}

fn bench_forward(c: &mut Criterion) {
    let x = random_batch(64, 4, 2);
    let mut group = c.benchmark_group("forward_64x4");
    for (name, config) in presets() {
        let model = Model::build(config).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(name), &model, |b, model| {
            b.iter(|| model.predict(black_box(&x)).unwrap())
        });
    }
    group.finish();
}

fn bench_forward_backward(c: &mut Criterion) {
    let x = random_batch(64, 4, 2);
    let y = random_batch(64, 1, 3);
    let mut group = c.benchmark_group("forward_backward_64x4");
    for (name, config) in presets() {
        let model = Model::build(config).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(name), &model, |b, model| {
            b.iter(|| {
                let mut m = model.clone();
                let mut tape = Tape::new();
                let bound = m.bind(&mut tape, true);
                let xv = tape.leaf(x.clone(), false);
                let yv = tape.leaf(y.clone(), false);
                let pred = m
                    .forward_on_tape(&mut tape, &bound, xv, Mode::Train, 0, 0)
                    .unwrap();
                let loss = mse_on_tape(&mut tape, pred, yv).unwrap();
                tape.backward(loss).unwrap()
            })
        });
    }
    group.finish();
}

fn bench_train_epoch(c: &mut Criterion) {
    let data = gen_by_name("friedman2", 512, 0.0, 4).unwrap();
    let rows: Vec<usize> = (0..data.n()).collect();
    let data = data.scale_features(&rows).scale_target(&rows);
    let split = split_indices(data.n(), (1.0, 0.0, 0.0), 4).unwrap();
    let mut group = c.benchmark_group("train_epoch_512");
    group.sample_size(10);
    for (name, config) in presets() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &config, |b, config| {
            b.iter(|| {
                let mut model = Model::build(config.clone()).unwrap();
                let cfg = TrainConfig {
                    optimizer: Optimizer::adam(1e-3),
                    epochs: 1,
                    batch_size: 64,
                    seed: 4,
                    ..TrainConfig::default()
                };
                train(&mut model, &data, &split, &cfg).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_forward, bench_forward_backward, bench_train_epoch);
criterion_main!(benches);
