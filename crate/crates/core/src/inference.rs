//! Five-crop prediction: rescale to 256x256, classify the four corner crops
//! and the centre crop, average the probability vectors.

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;

use crate::data::{rescale_image, CROP_SIZE, RESCALE_SIZE};
use crate::error::{Error, Result};
use crate::imaging::{crop, is_readable_image, load_image};
use crate::model::{AgeClass, Network, Preprocess, NUM_CLASSES};
use crate::rng::rng_for;
use crate::tensor::{Mode, Tensor};
use crate::training::{argmax, Head};

/// `(top, left)` of the five crops: the corners, then the centre.
pub const CROP_OFFSETS: [(usize, usize); 5] = [(0, 0), (0, 32), (32, 0), (32, 32), (16, 16)];

pub fn five_crop(img: &Tensor) -> Result<[Tensor; 5]> {
    let (h, w, _) = img.dims3()?;
    if (h, w) != (RESCALE_SIZE, RESCALE_SIZE) {
        return Err(Error::InvalidArgument(format!(
            "five-crop needs a {RESCALE_SIZE}x{RESCALE_SIZE} image, got {h}x{w}"
        )));
    }
    let c = |i: usize| crop(img, CROP_OFFSETS[i].0, CROP_OFFSETS[i].1, CROP_SIZE, CROP_SIZE);
    Ok([c(0)?, c(1)?, c(2)?, c(3)?, c(4)?])
}

/// Anything mapping a 224x224 RGB crop to class probabilities.
pub trait Classifier: Sync {
    fn classify(&self, crop: &Tensor) -> Result<Vec<f64>>;
}

/// Frozen backbone plus trained head.
pub struct AgeModel {
    pub backbone: Network,
    pub head: Head,
    pub preprocess: Preprocess,
}

impl AgeModel {
    pub fn new(backbone: Network, head: Head, preprocess: Preprocess) -> Result<Self> {
        let features: usize = backbone.spec().output_shape()?.iter().product();
        if features != head.input_len() {
            return Err(Error::ShapeMismatch {
                op: "backbone output vs head input",
                left: vec![features],
                right: vec![head.input_len()],
            });
        }
        Ok(AgeModel { backbone, head, preprocess })
    }
}

impl Classifier for AgeModel {
    fn classify(&self, crop: &Tensor) -> Result<Vec<f64>> {
        let input = self.preprocess.apply(crop)?;
        let features = self.backbone.forward(&input, Mode::Eval, &mut rng_for(&[0]))?;
        self.head.probabilities(features.data())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub predicted: AgeClass,
    pub per_crop: Vec<Vec<f64>>,
}

/// Averages per-crop probability vectors in the given order and takes the
/// arg-max, lowest index first on ties.
pub fn average_predictions(per_crop: Vec<Vec<f64>>) -> Result<Prediction> {
    let n = per_crop.first().map(Vec::len).unwrap_or(0);
    if n != NUM_CLASSES || per_crop.iter().any(|p| p.len() != n) {
        return Err(Error::InvalidArgument(format!(
            "expected {NUM_CLASSES}-class probability vectors"
        )));
    }
    // Offsets from the first vector, so identical vectors average to
    // themselves exactly.
    let base = &per_crop[0];
    let k = per_crop.len() as f64;
    let probs: Vec<f64> = (0..n)
        .map(|c| base[c] + per_crop.iter().map(|p| p[c] - base[c]).sum::<f64>() / k)
        .collect();
    Ok(Prediction {
        predicted: AgeClass::new(argmax(&probs))?,
        probs,
        per_crop,
    })
}

/// Five-crop prediction for an image of any size.
pub fn predict(model: &dyn Classifier, img: &Tensor) -> Result<Prediction> {
    let crops = five_crop(&rescale_image(img)?)?;
    let per_crop = crops
        .par_iter()
        .map(|c| model.classify(c))
        .collect::<Result<Vec<_>>>()?;
    average_predictions(per_crop)
}

/// One prediction log line: `path<TAB>label<TAB>p0 ... p7`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRecord {
    pub path: PathBuf,
    pub predicted: AgeClass,
    pub probs: Vec<f64>,
}

impl PredictionRecord {
    pub fn to_line(&self) -> String {
        let mut line = format!("{}\t{}", self.path.display(), self.predicted);
        for p in &self.probs {
            line.push_str(&format!("\t{p:.6}"));
        }
        line
    }

    pub fn parse(line: &str, line_no: usize) -> Result<Self> {
        let err = |message: String| Error::Parse { line: line_no, message };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 + NUM_CLASSES {
            return Err(err(format!("expected {} fields, found {}", 2 + NUM_CLASSES, fields.len())));
        }
        let predicted = fields[1].parse().map_err(|e: Error| err(e.to_string()))?;
        let probs = fields[2..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| err(format!("{f:?}: {e}"))))
            .collect::<Result<_>>()?;
        Ok(PredictionRecord {
            path: PathBuf::from(fields[0]),
            predicted,
            probs,
        })
    }
}

pub fn format_prediction_log(records: &[PredictionRecord]) -> String {
    records.iter().map(|r| r.to_line() + "\n").collect()
}

pub fn parse_prediction_log(text: &str) -> Result<Vec<PredictionRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| PredictionRecord::parse(l, i + 1))
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct BatchOutput {
    pub records: Vec<PredictionRecord>,
    /// Inputs that could not be read, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

/// Predicts every path, sorted by path. Unreadable images are skipped and
/// reported.
pub fn predict_batch(
    paths: &[PathBuf],
    mut predict_one: impl FnMut(&Tensor) -> Result<Prediction>,
) -> Result<BatchOutput> {
    let mut sorted = paths.to_vec();
    sorted.sort();
    sorted.dedup();
    let mut out = BatchOutput::default();
    for path in sorted {
        let img = match load_image(&path) {
            Ok(img) => img,
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                out.skipped.push((path, e.to_string()));
                continue;
            }
        };
        let p = predict_one(&img)?;
        out.records.push(PredictionRecord {
            path,
            predicted: p.predicted,
            probs: p.probs,
        });
    }
    Ok(out)
}

/// Image files directly under `dir` or in its subdirectories, sorted.
pub fn collect_images(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", dir.display())));
    }
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if is_readable_image(&path) {
                out.push(path);
            } else {
                warn!("skipping unreadable file {}", path.display());
            }
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::save_image;
    use crate::model::{build_backbone, zero_weights, HeadShape};
    use proptest::prelude::*;

    struct Uniform;
    impl Classifier for Uniform {
        fn classify(&self, _: &Tensor) -> Result<Vec<f64>> {
            Ok(vec![0.125; 8])
        }
    }

    // Reads the top-left pixel, so each crop position gets its own vector.
    struct ByCorner;
    impl Classifier for ByCorner {
        fn classify(&self, crop: &Tensor) -> Result<Vec<f64>> {
            let k = crop.at(0, 0, 0) as usize;
            let mut p = vec![0.0; 8];
            p[k] = 0.6;
            p[(k + 1) % 8] = 0.4;
            Ok(p)
        }
    }

    fn positions() -> Tensor {
        let mut img = Tensor::zeros(&[256, 256, 3]);
        for (i, &(t, l)) in CROP_OFFSETS.iter().enumerate() {
            img.data_mut()[(t * 256 + l) * 3] = i as f32;
        }
        img
    }

    #[test]
    fn crop_offsets_and_geometry() {
        let img = Tensor::from_fn(&[256, 256, 3], |i| i as f32);
        let crops = five_crop(&img).unwrap();
        for (c, &(t, l)) in crops.iter().zip(&CROP_OFFSETS) {
            assert_eq!(c.shape(), &[224, 224, 3]);
            assert_eq!(c.at(0, 0, 0), img.at(t, l, 0));
            assert_eq!(c.at(223, 223, 2), img.at(t + 223, l + 223, 2));
        }
        // Centre crop spans rows and columns 16..=239.
        assert_eq!(crops[4].at(0, 0, 1), img.at(16, 16, 1));
        assert_eq!(crops[4].at(223, 0, 1), img.at(239, 16, 1));
        assert!(five_crop(&Tensor::zeros(&[255, 256, 3])).is_err());

        let constant = Tensor::filled(&[256, 256, 3], 9.0);
        for c in five_crop(&constant).unwrap() {
            assert!(c.data().iter().all(|&v| v == 9.0));
        }
    }

    #[test]
    fn uniform_model_predicts_first_class() {
        let p = predict(&Uniform, &Tensor::filled(&[100, 80, 3], 3.0)).unwrap();
        assert_eq!(p.predicted.index(), 0);
        assert!(p.probs.iter().all(|&v| (v - 0.125).abs() < 1e-15));
    }

    #[test]
    fn distinct_crop_outputs_average_by_hand() {
        let p = predict(&ByCorner, &positions()).unwrap();
        // Crops 0..5 put 0.6 on class k and 0.4 on class k + 1.
        let expect = [0.12, 0.2, 0.2, 0.2, 0.2, 0.08, 0.0, 0.0];
        for (a, b) in p.probs.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{:?}", p.probs);
        }
        assert_eq!(p.predicted.index(), 1);
        assert_eq!(p.per_crop.len(), 5);
    }

    #[test]
    fn constant_image_five_crop_equals_centre_crop() {
        let shape = HeadShape { input_side: 7, input_channels: 512, hidden: [6, 5], classes: 8, dropout: 0.3 };
        let spec = build_backbone();
        // Zero backbone weights keep this cheap to reason about but still
        // exercise the whole path.
        let backbone = Network::new(spec.clone(), zero_weights(&spec)).unwrap();
        let model = AgeModel::new(backbone, Head::init(shape, 4).unwrap(), Preprocess::default()).unwrap();
        let img = Tensor::filled(&[256, 256, 3], 120.0);
        let five = predict(&model, &img).unwrap();
        let centre = model.classify(&five_crop(&img).unwrap()[4]).unwrap();
        assert_eq!(five.probs, centre);
    }

    #[test]
    fn prediction_log_round_trip() {
        let rec = PredictionRecord {
            path: PathBuf::from("faces/a b.png"),
            predicted: AgeClass::new(3).unwrap(),
            probs: vec![0.1, 0.0, 0.2, 0.4, 0.1, 0.1, 0.05, 0.05],
        };
        let line = rec.to_line();
        assert_eq!(line, "faces/a b.png\t15-20\t0.100000\t0.000000\t0.200000\t0.400000\t0.100000\t0.100000\t0.050000\t0.050000");
        let back = parse_prediction_log(&format_prediction_log(std::slice::from_ref(&rec))).unwrap();
        assert_eq!(back, vec![rec]);
        assert!(matches!(parse_prediction_log("x\t0-2\t0.5"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn batch_is_sorted_and_skips_unreadable() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::filled(&[10, 12, 3], 50.0);
        for name in ["b.png", "a.ppm", "c.png"] {
            save_image(&dir.path().join(name), &img).unwrap();
        }
        fs::write(dir.path().join("bad.png"), b"junk").unwrap();
        let listed = collect_images(dir.path()).unwrap();
        assert_eq!(listed.len(), 3);

        let mut paths = listed.clone();
        paths.reverse();
        paths.push(dir.path().join("bad.png"));
        let out = predict_batch(&paths, |img| predict(&Uniform, img)).unwrap();
        let names: Vec<_> = out.records.iter().map(|r| r.path.file_name().unwrap().to_str().unwrap()).collect();
        assert_eq!(names, ["a.ppm", "b.png", "c.png"]);
        assert_eq!(out.skipped.len(), 1);

        let again = predict_batch(&paths, |img| predict(&Uniform, img)).unwrap();
        assert_eq!(format_prediction_log(&again.records), format_prediction_log(&out.records));
        assert!(predict_batch(&[], |img| predict(&Uniform, img)).unwrap().records.is_empty());
    }

    fn prob_vectors() -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(0.001f64..1.0, 8), 5).prop_map(|vs| {
            vs.into_iter()
                .map(|v| {
                    let s: f64 = v.iter().sum();
                    v.into_iter().map(|x| x / s).collect()
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn averaging_is_permutation_invariant_and_normalized(
            vs in prob_vectors(),
            perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
        ) {
            let a = average_predictions(vs.clone()).unwrap();
            let b = average_predictions(perm.iter().map(|&i| vs[i].clone()).collect()).unwrap();
            for (x, y) in a.probs.iter().zip(&b.probs) {
                prop_assert!((x - y).abs() < 1e-15);
            }
            prop_assert!((a.probs.iter().sum::<f64>() - 1.0).abs() < 5e-6);
        }
    }
}
