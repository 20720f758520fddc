//! Head-only training: categorical cross-entropy, exact backpropagation
//! through the fully connected head, and Adam. The backbone is only ever
//! read, so its parameters cannot change.

mod head;

use std::ops::ControlFlow;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::data::augment::AugmentConfig;
use crate::data::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::imaging::load_image;
use crate::model::{Network, Preprocess};
use crate::rng::{rng_for, stream};
use crate::tensor::{dropout_mask, softmax_f64, Mode};
pub use head::{argmax, Dense, Head, HeadGradients};

/// Lower bound applied to probabilities before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Indicator vector with a single 1 at `class`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OneHot {
    pub class: usize,
    pub classes: usize,
}

impl OneHot {
    pub fn new(class: usize, classes: usize) -> Result<Self> {
        if class < classes {
            Ok(OneHot { class, classes })
        } else {
            Err(Error::InvalidArgument(format!(
                "class {class} out of range for {classes} classes"
            )))
        }
    }

    pub fn to_vec(self) -> Vec<f64> {
        let mut v = vec![0.0; self.classes];
        v[self.class] = 1.0;
        v
    }
}

/// `-sum_c t_c ln(p_c)`, with `p` floored at [`PROB_FLOOR`].
pub fn cross_entropy(p: &[f64], target: OneHot) -> f64 {
    debug_assert_eq!(p.len(), target.classes);
    -p[target.class].max(PROB_FLOOR).ln()
}

/// Gradient of cross-entropy composed with softmax, with respect to the
/// logits: `softmax(z) - t`.
pub fn softmax_ce_grad(logits: &[f64], target: OneHot) -> Result<Vec<f64>> {
    if logits.len() != target.classes {
        return Err(Error::ShapeMismatch {
            op: "softmax_ce_grad",
            left: vec![logits.len()],
            right: vec![target.classes],
        });
    }
    let mut g = softmax_f64(logits);
    g[target.class] -= 1.0;
    Ok(g)
}

/// Gradients of the per-sample loss for every trainable head parameter.
/// `mask` is the inverted-dropout mask for the first hidden layer, or `None`
/// to run without dropout.
pub fn backward_head(
    head: &Head,
    features: &[f32],
    target: OneHot,
    mask: Option<&[f64]>,
) -> Result<HeadGradients> {
    let mut grads = head.zero_gradients();
    head.accumulate_gradients(features, target, mask, &mut grads, 1.0)?;
    Ok(grads)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates for a list of parameter slices.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        AdamState {
            config,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::InvalidArgument(format!(
            "adam_step: {} parameter groups, {} gradient groups, {} moment groups",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: vec![p.len()],
                right: vec![g.len()],
            });
        }
    }
    state.step += 1;
    let AdamConfig {
        learning_rate: lr,
        beta1: b1,
        beta2: b2,
        epsilon: eps,
    } = state.config;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 64,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub mean_train_loss: f64,
    /// `None` when there is no validation split.
    pub val_exact_acc: Option<f64>,
}

impl EpochLog {
    /// `epoch<TAB>mean_train_loss<TAB>val_exact_acc`.
    pub fn to_line(&self) -> String {
        let acc = self
            .val_exact_acc
            .map_or_else(|| "nan".to_string(), |a| format!("{a:.6}"));
        format!("{}\t{:.6}\t{}", self.epoch, self.mean_train_loss, acc)
    }
}

/// Where training features come from. Implementations must be deterministic
/// in `(epoch, index)`.
pub trait FeatureSource: Sync {
    fn train_len(&self) -> usize;
    fn train_label(&self, index: usize) -> usize;
    fn train_features(&self, epoch: usize, index: usize) -> Result<Vec<f32>>;
    /// Validation features and labels; computed once per training run.
    fn validation(&self) -> Result<Vec<(Vec<f32>, usize)>>;
}

/// Fixed feature vectors, e.g. precomputed or synthetic.
#[derive(Clone, Debug, Default)]
pub struct InMemoryFeatures {
    pub train: Vec<(Vec<f32>, usize)>,
    pub val: Vec<(Vec<f32>, usize)>,
}

impl FeatureSource for InMemoryFeatures {
    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn train_label(&self, index: usize) -> usize {
        self.train[index].1
    }

    fn train_features(&self, _epoch: usize, index: usize) -> Result<Vec<f32>> {
        Ok(self.train[index].0.clone())
    }

    fn validation(&self) -> Result<Vec<(Vec<f32>, usize)>> {
        Ok(self.val.clone())
    }
}

/// Pool5 features of augmented training crops from a frozen backbone.
/// Validation images use the deterministic centre crop.
pub struct ImageFeatures<'a> {
    pub backbone: &'a Network,
    pub preprocess: Preprocess,
    pub augment: AugmentConfig,
    pub seed: u64,
    pub train: Vec<(PathBuf, usize)>,
    pub val: Vec<(PathBuf, usize)>,
}

impl<'a> ImageFeatures<'a> {
    pub fn from_manifest(
        backbone: &'a Network,
        manifest: &DatasetManifest,
        preprocess: Preprocess,
        augment: AugmentConfig,
        seed: u64,
    ) -> Self {
        let pick = |split| {
            manifest
                .samples
                .iter()
                .filter(|s| s.split == split)
                .map(|s| (s.path.clone(), s.label.index()))
                .collect()
        };
        ImageFeatures {
            backbone,
            preprocess,
            augment,
            seed,
            train: pick(Split::Train),
            val: pick(Split::Val),
        }
    }

    fn features_of(&self, crop: &crate::tensor::Tensor) -> Result<Vec<f32>> {
        let input = self.preprocess.apply(crop)?;
        // Eval mode: the backbone has no dropout, and the rng is never drawn.
        let mut rng = rng_for(&[0]);
        Ok(self.backbone.forward(&input, Mode::Eval, &mut rng)?.into_data())
    }
}

impl FeatureSource for ImageFeatures<'_> {
    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn train_label(&self, index: usize) -> usize {
        self.train[index].1
    }

    fn train_features(&self, epoch: usize, index: usize) -> Result<Vec<f32>> {
        let img = load_image(&self.train[index].0)?;
        let mut rng = rng_for(&[self.seed, stream::AUGMENT, epoch as u64, index as u64]);
        let crop = self.augment.apply(&img, &mut rng)?;
        self.features_of(&crop)
    }

    fn validation(&self) -> Result<Vec<(Vec<f32>, usize)>> {
        self.val
            .par_iter()
            .map(|(path, label)| {
                let crop = self.augment.center_crop(&load_image(path)?)?;
                Ok((self.features_of(&crop)?, *label))
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub head: Head,
    pub log: Vec<EpochLog>,
}

/// Fraction of `(features, label)` pairs the head classifies correctly.
pub fn exact_accuracy_of(head: &Head, data: &[(Vec<f32>, usize)]) -> Result<Option<f64>> {
    if data.is_empty() {
        return Ok(None);
    }
    let mut correct = 0usize;
    for (f, label) in data {
        if head.predict_class(f)? == *label {
            correct += 1;
        }
    }
    Ok(Some(correct as f64 / data.len() as f64))
}

/// The epoch loop: seeded shuffle, mini-batches, mean batch loss, one Adam
/// step per batch. `on_epoch` sees every epoch's log and the current head
/// and may stop training early.
pub fn fit(
    mut head: Head,
    source: &dyn FeatureSource,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &Head) -> Result<ControlFlow<()>>,
) -> Result<TrainOutcome> {
    let n = source.train_len();
    if n == 0 {
        return Err(Error::Dataset("training split is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let mut log = Vec::with_capacity(config.epochs);
    if config.epochs == 0 {
        return Ok(TrainOutcome { head, log });
    }
    let classes = head.classes();
    let val = source.validation()?;
    let mut adam = AdamState::new(config.adam, &head.parameter_sizes());
    let mut grads = head.zero_gradients();

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_for(&[config.seed, stream::SHUFFLE, epoch as u64]));

        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let features: Vec<Vec<f32>> = batch
                .par_iter()
                .map(|&i| source.train_features(epoch, i))
                .collect::<Result<_>>()?;
            grads.zero();
            let scale = 1.0 / batch.len() as f64;
            for (&i, f) in batch.iter().zip(&features) {
                let target = OneHot::new(source.train_label(i), classes)?;
                let mask = if head.dropout > 0.0 {
                    let mut rng = rng_for(&[config.seed, stream::DROPOUT, epoch as u64, i as u64]);
                    Some(dropout_mask(head.hidden_sizes()[0], head.dropout, &mut rng)?)
                } else {
                    None
                };
                loss_sum += head.accumulate_gradients(f, target, mask.as_deref(), &mut grads, scale)?;
            }
            if !loss_sum.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            head.apply_adam(&grads, &mut adam)?;
        }

        let entry = EpochLog {
            epoch,
            mean_train_loss: loss_sum / n as f64,
            val_exact_acc: exact_accuracy_of(&head, &val)?,
        };
        log.push(entry);
        if on_epoch(&entry, &head)?.is_break() {
            break;
        }
    }
    Ok(TrainOutcome { head, log })
}

/// Trains `head` on the manifest's train split, reading images through the
/// frozen `backbone`.
pub fn train(
    backbone: &Network,
    head: Head,
    manifest: &DatasetManifest,
    config: &TrainConfig,
    preprocess: Preprocess,
    augment: AugmentConfig,
    on_epoch: impl FnMut(&EpochLog, &Head) -> Result<ControlFlow<()>>,
) -> Result<TrainOutcome> {
    let source = ImageFeatures::from_manifest(backbone, manifest, preprocess, augment, config.seed);
    fit(head, &source, config, on_epoch)
}
