use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use agerange_core::model::{build_head, init_weights};
use agerange_core::tensor::{conv2d, maxpool2d};
use agerange_core::training::{Head, OneHot};
use agerange_core::Tensor;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("conv2d");
    group.sample_size(10);
    for (name, side, cin, cout) in [("conv1_2", 224, 64, 64), ("conv3_2", 56, 256, 256), ("conv5_2", 14, 512, 512)] {
        let x = random(&[side, side, cin], &mut rng);
        let w = random(&[3, 3, cin, cout], &mut rng);
        let b = random(&[cout], &mut rng);
        group.bench_function(name, |bench| bench.iter(|| conv2d(black_box(&x), &w, &b, 1, 1).unwrap()));
    }
    group.finish();
}

fn pool(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[224, 224, 64], &mut rng);
    c.bench_function("maxpool2d 224x224x64", |b| b.iter(|| maxpool2d(black_box(&x), 2, 2).unwrap()));
}

fn head(c: &mut Criterion) {
    let head = Head::from_store(&init_weights(&build_head(8).unwrap(), 3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let features: Vec<f32> = (0..head.input_len()).map(|_| rng.gen_range(0.0..4.0f32).max(1.5) - 1.5).collect();
    let target = OneHot::new(3, 8).unwrap();
    let mut grads = head.zero_gradients();
    let mut group = c.benchmark_group("head");
    group.sample_size(10);
    group.bench_function("probabilities", |b| b.iter(|| head.probabilities(black_box(&features)).unwrap()));
    group.bench_function("accumulate_gradients", |b| {
        b.iter(|| head.accumulate_gradients(black_box(&features), target, None, &mut grads, 1.0).unwrap())
    });
    group.finish();
}

criterion_group!(benches, conv, pool, head);
criterion_main!(benches);
