use std::ops::ControlFlow;
use std::path::PathBuf;

use agerange_core::data::{AugmentConfig, DatasetManifest, Sample, Split};
use agerange_core::imaging::save_image;
use agerange_core::model::{build_backbone, build_head, init_weights, weights::encode, HeadShape};
use agerange_core::training::{
    exact_accuracy_of, fit, train, AdamConfig, Head, InMemoryFeatures, TrainConfig,
};
use agerange_core::{AgeClass, Network, Preprocess, Tensor};

/// One sample per class; class `c` lights up its own block of pool5
/// positions, so the set is linearly separable.
fn separable_set(len: usize) -> Vec<(Vec<f32>, usize)> {
    let block = len / 8;
    (0..8)
        .map(|c| {
            let mut f = vec![0.0f32; len];
            for k in 0..64 {
                f[c * block + (k * 37) % block] = 1.0;
            }
            (f, c)
        })
        .collect()
}

fn full_head(seed: u64) -> Head {
    Head::from_store(&init_weights(&build_head(8).unwrap(), seed)).unwrap()
}

#[test]
fn full_size_head_overfits_separable_set() {
    let data = InMemoryFeatures { train: separable_set(25088), val: vec![] };
    let cfg = TrainConfig { epochs: 200, batch_size: 64, seed: 5, adam: AdamConfig::default() };
    let train_set = data.train.clone();
    let out = fit(full_head(1), &data, &cfg, |_, head| {
        let acc = exact_accuracy_of(head, &train_set)?.unwrap();
        Ok(if acc == 1.0 { ControlFlow::Break(()) } else { ControlFlow::Continue(()) })
    })
    .unwrap();
    assert!(out.log.len() <= 200);
    assert_eq!(exact_accuracy_of(&out.head, &data.train).unwrap(), Some(1.0));
}

#[test]
fn full_batch_loss_does_not_increase_without_dropout() {
    let data = InMemoryFeatures { train: separable_set(25088), val: vec![] };
    let mut head = full_head(2);
    head.dropout = 0.0;
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 8,
        seed: 0,
        adam: AdamConfig { learning_rate: 1e-4, ..AdamConfig::default() },
    };
    let out = fit(head, &data, &cfg, |_, _| Ok(ControlFlow::Continue(()))).unwrap();
    let losses: Vec<f64> = out.log.iter().map(|l| l.mean_train_loss).collect();
    assert_eq!(losses.len(), 5);
    for w in losses.windows(2) {
        assert!(w[1] <= w[0], "{losses:?}");
    }
}

#[test]
fn same_seed_gives_identical_curves() {
    let shape = HeadShape { input_side: 2, input_channels: 4, hidden: [12, 6], classes: 8, dropout: 0.3 };
    let data = InMemoryFeatures { train: separable_set(16), val: separable_set(16) };
    let cfg = TrainConfig { epochs: 10, batch_size: 3, seed: 77, ..TrainConfig::default() };
    let run = || fit(Head::init(shape, 4).unwrap(), &data, &cfg, |_, _| Ok(ControlFlow::Continue(()))).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.log, b.log);
    assert_eq!(a.head, b.head);
    let lines: Vec<String> = a.log.iter().map(|l| l.to_line()).collect();
    assert!(lines.iter().all(|l| l.split('\t').count() == 3));

    let other = fit(
        Head::init(shape, 4).unwrap(),
        &data,
        &TrainConfig { seed: 78, ..cfg },
        |_, _| Ok(ControlFlow::Continue(())),
    )
    .unwrap();
    assert_ne!(other.log, a.log);
}

#[test]
fn training_through_images_leaves_backbone_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let mut samples = Vec::new();
    for (i, split) in [Split::Train, Split::Train, Split::Val].into_iter().enumerate() {
        let path: PathBuf = dir.path().join(format!("{i}.png"));
        save_image(&path, &Tensor::from_fn(&[40, 30, 3], |k| ((k * (i + 3)) % 256) as f32)).unwrap();
        samples.push(Sample { path, label: AgeClass::new(i).unwrap(), split });
    }
    let manifest = DatasetManifest { samples, seed: Some(0) };

    let spec = build_backbone();
    let backbone = Network::new(spec.clone(), init_weights(&spec, 9)).unwrap();
    let before = encode(backbone.weights()).unwrap();
    let cfg = TrainConfig { epochs: 1, batch_size: 2, seed: 1, ..TrainConfig::default() };
    let out = train(
        &backbone,
        full_head(3),
        &manifest,
        &cfg,
        Preprocess::default(),
        AugmentConfig::default(),
        |_, _| Ok(ControlFlow::Continue(())),
    )
    .unwrap();
    assert_eq!(encode(backbone.weights()).unwrap(), before);
    assert_eq!(out.log.len(), 1);
    assert!(out.log[0].val_exact_acc.is_some());
    assert!(out.log[0].mean_train_loss.is_finite());
}
