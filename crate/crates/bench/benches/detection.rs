use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use agerange_core::mtcnn::{nms, pnet_stage, BoundingBox, OverlapMode, PNet};
use agerange_core::Tensor;

fn random_boxes(n: usize, rng: &mut ChaCha8Rng) -> Vec<BoundingBox> {
    (0..n)
        .map(|_| {
            let (x, y) = (rng.gen_range(0.0..300.0f32), rng.gen_range(0.0..300.0f32));
            let s = rng.gen_range(12.0..80.0f32);
            BoundingBox::new(x, y, x + s, y + s, rng.gen_range(0.0..1.0))
        })
        .collect()
}

fn suppression(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in [50, 500] {
        let boxes = random_boxes(n, &mut rng);
        c.bench_function(&format!("nms union {n}"), |b| {
            b.iter(|| nms(black_box(&boxes), 0.5, OverlapMode::Union))
        });
    }
}

fn proposal(c: &mut Criterion) {
    let net = PNet::random(2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = Tensor::from_fn(&[120, 160, 3], |_| rng.gen_range(0.0..255.0));
    let mut group = c.benchmark_group("pnet_stage");
    group.sample_size(10);
    group.bench_function("120x160 min_face 20", |b| {
        b.iter(|| pnet_stage(black_box(&img), &net, 0.6, 20.0, 0.709).unwrap())
    });
    group.finish();
}

criterion_group!(benches, suppression, proposal);
criterion_main!(benches);
