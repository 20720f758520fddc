//! `key = value` pipeline configuration with command-line overrides.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use agerange_core::data::AugmentConfig;
use agerange_core::mtcnn::DetectorConfig;
use agerange_core::training::{AdamConfig, TrainConfig};
use agerange_core::Preprocess;

use crate::UsageError;

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub dataset_root: PathBuf,
    pub output_dir: PathBuf,
    /// Empty means a random backbone initialised from `seed`.
    pub backbone_weights: PathBuf,
    pub mtcnn_weights: PathBuf,
    pub min_face: f64,
    pub factor: f64,
    pub pnet_threshold: f32,
    pub rnet_threshold: f32,
    pub onet_threshold: f32,
    pub chip_size: usize,
    pub split_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub checkpoint_every: usize,
    pub flip_probability: f64,
    pub max_rotation: f64,
    pub mean_r: f32,
    pub mean_g: f32,
    pub mean_b: f32,
    pub detect_on_predict: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let det = DetectorConfig::default();
        let adam = AdamConfig::default();
        let train = TrainConfig::default();
        let aug = AugmentConfig::default();
        let [mean_r, mean_g, mean_b] = Preprocess::default().mean;
        PipelineConfig {
            seed: 0,
            dataset_root: PathBuf::from("data"),
            output_dir: PathBuf::from("out"),
            backbone_weights: PathBuf::new(),
            mtcnn_weights: PathBuf::from("mtcnn"),
            min_face: det.min_face,
            factor: det.factor,
            pnet_threshold: det.pnet_threshold,
            rnet_threshold: det.rnet_threshold,
            onet_threshold: det.onet_threshold,
            chip_size: 256,
            split_ratio: agerange_core::data::DEFAULT_SPLIT_RATIO,
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            checkpoint_every: 10,
            flip_probability: aug.flip_probability,
            max_rotation: aug.max_rotation_degrees,
            mean_r,
            mean_g,
            mean_b,
            detect_on_predict: false,
        }
    }
}

/// Every configuration key, in file order.
pub const KEYS: [&str; 25] = [
    "seed",
    "dataset_root",
    "output_dir",
    "backbone_weights",
    "mtcnn_weights",
    "min_face",
    "factor",
    "pnet_threshold",
    "rnet_threshold",
    "onet_threshold",
    "chip_size",
    "split_ratio",
    "epochs",
    "batch_size",
    "learning_rate",
    "beta1",
    "beta2",
    "epsilon",
    "checkpoint_every",
    "flip_probability",
    "max_rotation",
    "mean_r",
    "mean_g",
    "mean_b",
    "detect_on_predict",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, UsageError>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| UsageError(format!("invalid value {value:?} for {key}: {e}")))
}

impl PipelineConfig {
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "dataset_root" => self.dataset_root.display().to_string(),
            "output_dir" => self.output_dir.display().to_string(),
            "backbone_weights" => self.backbone_weights.display().to_string(),
            "mtcnn_weights" => self.mtcnn_weights.display().to_string(),
            "min_face" => self.min_face.to_string(),
            "factor" => self.factor.to_string(),
            "pnet_threshold" => self.pnet_threshold.to_string(),
            "rnet_threshold" => self.rnet_threshold.to_string(),
            "onet_threshold" => self.onet_threshold.to_string(),
            "chip_size" => self.chip_size.to_string(),
            "split_ratio" => self.split_ratio.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "epsilon" => self.epsilon.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "flip_probability" => self.flip_probability.to_string(),
            "max_rotation" => self.max_rotation.to_string(),
            "mean_r" => self.mean_r.to_string(),
            "mean_g" => self.mean_g.to_string(),
            "mean_b" => self.mean_b.to_string(),
            "detect_on_predict" => self.detect_on_predict.to_string(),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), UsageError> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "dataset_root" => self.dataset_root = value.into(),
            "output_dir" => self.output_dir = value.into(),
            "backbone_weights" => self.backbone_weights = value.into(),
            "mtcnn_weights" => self.mtcnn_weights = value.into(),
            "min_face" => self.min_face = parse(key, value)?,
            "factor" => self.factor = parse(key, value)?,
            "pnet_threshold" => self.pnet_threshold = parse(key, value)?,
            "rnet_threshold" => self.rnet_threshold = parse(key, value)?,
            "onet_threshold" => self.onet_threshold = parse(key, value)?,
            "chip_size" => self.chip_size = parse(key, value)?,
            "split_ratio" => self.split_ratio = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "epsilon" => self.epsilon = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "flip_probability" => self.flip_probability = parse(key, value)?,
            "max_rotation" => self.max_rotation = parse(key, value)?,
            "mean_r" => self.mean_r = parse(key, value)?,
            "mean_g" => self.mean_g = parse(key, value)?,
            "mean_b" => self.mean_b = parse(key, value)?,
            "detect_on_predict" => self.detect_on_predict = parse(key, value)?,
            _ => return Err(UsageError(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    /// Parses `key = value` lines over the defaults. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn from_text(text: &str) -> Result<Self, UsageError> {
        let mut cfg = PipelineConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| UsageError(format!("config line {}: expected key = value", i + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), UsageError> {
        let fail = |msg: &str| Err(UsageError(msg.to_string()));
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return fail("split_ratio must be in (0, 1)");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return fail("factor must be in (0, 1)");
        }
        if self.min_face.is_nan() || self.min_face < 12.0 {
            return fail("min_face must be at least 12");
        }
        for t in [self.pnet_threshold, self.rnet_threshold, self.onet_threshold] {
            if !(0.0..=1.0).contains(&t) {
                return fail("detection thresholds must be in [0, 1]");
            }
        }
        if self.chip_size == 0 {
            return fail("chip_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return fail("flip_probability must be in [0, 1]");
        }
        if !(0.0..=45.0).contains(&self.max_rotation) {
            return fail("max_rotation must be in [0, 45]");
        }
        if !(self.learning_rate >= 0.0 && self.epsilon > 0.0) {
            return fail("learning_rate must be non-negative and epsilon positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return fail("beta1 and beta2 must be in [0, 1)");
        }
        Ok(())
    }

    pub fn detector(&self) -> DetectorConfig {
        DetectorConfig {
            min_face: self.min_face,
            factor: self.factor,
            pnet_threshold: self.pnet_threshold,
            rnet_threshold: self.rnet_threshold,
            onet_threshold: self.onet_threshold,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            adam: AdamConfig {
                learning_rate: self.learning_rate,
                beta1: self.beta1,
                beta2: self.beta2,
                epsilon: self.epsilon,
            },
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            flip_probability: self.flip_probability,
            max_rotation_degrees: self.max_rotation,
        }
    }

    pub fn preprocess(&self) -> Preprocess {
        Preprocess {
            mean: [self.mean_r, self.mean_g, self.mean_b],
        }
    }
}

/// `dataset_root` becomes `--dataset-root`.
pub fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_text();
        assert_eq!(text.lines().count(), KEYS.len());
        assert!(text.contains("epochs = 50\n"));
        assert!(text.contains("batch_size = 64\n"));
        assert!(text.contains("backbone_weights = \n"));
        let back = PipelineConfig::from_text(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn parse_errors_are_usage_errors() {
        assert!(PipelineConfig::from_text("nonsense").is_err());
        assert!(PipelineConfig::from_text("colour = red").is_err());
        assert!(PipelineConfig::from_text("epochs = -1").is_err());
        assert!(PipelineConfig::from_text("split_ratio = 1.0").is_err());
        assert!(PipelineConfig::from_text("# comment\n\nepochs = 0\n").unwrap().epochs == 0);
    }

    proptest! {
        #[test]
        fn serialize_then_parse_is_identity(
            seed in any::<u64>(),
            ratio in 0.01f64..0.99,
            lr in 0.0f64..1.0,
            thr in 0.0f32..1.0,
            mean in -300.0f32..300.0,
            epochs in 0usize..1000,
            root in "[a-z0-9_/.-]{0,20}",
            flag in any::<bool>(),
        ) {
            let cfg = PipelineConfig {
                seed,
                split_ratio: ratio,
                learning_rate: lr,
                rnet_threshold: thr,
                mean_g: mean,
                epochs,
                dataset_root: root.into(),
                detect_on_predict: flag,
                ..PipelineConfig::default()
            };
            let back = PipelineConfig::from_text(&cfg.to_text()).unwrap();
            prop_assert_eq!(&back, &cfg);
            prop_assert_eq!(back.to_text(), cfg.to_text());
        }
    }
}
