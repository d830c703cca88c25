//! Kernel and model throughput benchmarks.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use gwcstereo::config::NetworkConfig;
use gwcstereo::model::StereoModel;
use gwcstereo::nn::RunMode;
use gwcstereo::params::{Leaves, ParamStore};
use gwcstereo::tensor::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_leaf(tape: &mut Tape<f32>, rng: &mut ChaCha8Rng, shape: &[usize]) -> gwcstereo::tensor::TensorId {
    let data: Vec<f32> = (0..shape.iter().product())
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    tape.leaf(shape, data, false).unwrap()
}

fn bench_conv3d(c: &mut Criterion) {
    c.bench_function("conv3d 8ch 8x16x32 k3", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::<f32>::new();
        let x = rand_leaf(&mut tape, &mut rng, &[1, 8, 8, 16, 32]);
        let w = rand_leaf(&mut tape, &mut rng, &[8, 8, 3, 3, 3]);
        b.iter(|| {
            let y = tape.conv3d(black_box(x), w, None, (1, 1, 1), (1, 1, 1)).unwrap();
            black_box(tape.value(y)[0]);
        });
    });
}

fn bench_gwc_volume(c: &mut Criterion) {
    c.bench_function("gwc volume 32ch 16x32 d8 g8", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::<f32>::new();
        let l = rand_leaf(&mut tape, &mut rng, &[1, 32, 16, 32]);
        let r = rand_leaf(&mut tape, &mut rng, &[1, 32, 16, 32]);
        b.iter(|| {
            let v = tape.gwc_volume(black_box(l), r, 8, 8).unwrap();
            black_box(tape.value(v)[0]);
        });
    });
}

fn bench_model_infer(c: &mut Criterion) {
    let cfg = NetworkConfig::desk();
    let mut ps = ParamStore::<f32>::new();
    let model = StereoModel::new(cfg, &mut ps, 0).unwrap();
    c.bench_function("desk model infer 64x128", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        b.iter(|| {
            let mut tape = Tape::<f32>::new();
            let mut lv = Leaves::new(&ps, false);
            let l = rand_leaf(&mut tape, &mut rng, &[1, 3, 64, 128]);
            let r = rand_leaf(&mut tape, &mut rng, &[1, 3, 64, 128]);
            let d = model.forward_infer(&mut tape, &mut ps, &mut lv, l, r).unwrap();
            black_box(tape.value(d)[0]);
        });
    });
}

fn bench_model_train_step(c: &mut Criterion) {
    let cfg = NetworkConfig::desk();
    let mut ps = ParamStore::<f32>::new();
    let model = StereoModel::new(cfg, &mut ps, 0).unwrap();
    let gt_map = gwcstereo::loss::DisparityMap::dense(64, 128, vec![4.0; 64 * 128]);
    c.bench_function("desk model forward+backward 64x128", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        b.iter(|| {
            let mut tape = Tape::<f32>::new();
            let mut lv = Leaves::new(&ps, true);
            let l = rand_leaf(&mut tape, &mut rng, &[1, 3, 64, 128]);
            let r = rand_leaf(&mut tape, &mut rng, &[1, 3, 64, 128]);
            let preds = model
                .forward_train(&mut tape, &mut ps, &mut lv, l, r, RunMode::train_frozen())
                .unwrap();
            let gt = gwcstereo::loss::GtBatch::<f32>::from_maps(&[&gt_map]).unwrap();
            let loss = gwcstereo::loss::total_loss(&mut tape, &preds, &gt, &[0.5, 0.5, 0.7, 1.0]).unwrap();
            tape.backward(loss).unwrap();
            black_box(tape.value(loss)[0]);
        });
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_conv3d, bench_gwc_volume, bench_model_infer, bench_model_train_step
}
criterion_main!(benches);
