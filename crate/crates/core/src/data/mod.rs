//! Dataset ingestion, per-class train/validation splitting and the manifest
//! file.

pub mod augment;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::imaging::is_readable_image;
use crate::model::{AgeClass, NUM_CLASSES};
use crate::rng::{rng_for, stream};

pub use augment::{
    center_crop, flip_horizontal, horizontal_flip, random_crop, random_crop_offsets, random_rotate,
    rescale_image, rotate, AugmentConfig, CROP_SIZE, RESCALE_SIZE,
};

pub const DEFAULT_SPLIT_RATIO: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            _ => Err(Error::InvalidArgument(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub path: PathBuf,
    pub label: AgeClass,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub samples: Vec<Sample>,
    /// Seed of the split that produced the assignment, if any.
    pub seed: Option<u64>,
}

/// A manifest plus the non-fatal problems met while building it.
#[derive(Clone, Debug)]
pub struct Ingested {
    pub manifest: DatasetManifest,
    pub warnings: Vec<String>,
}

impl DatasetManifest {
    /// `counts()[class] = [train, val]`.
    pub fn counts(&self) -> [[usize; 2]; NUM_CLASSES] {
        let mut c = [[0; 2]; NUM_CLASSES];
        for s in &self.samples {
            c[s.label.index()][(s.split == Split::Val) as usize] += 1;
        }
        c
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    /// One `path<TAB>label<TAB>split` line per sample.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            out.push_str(&format!("{}\t{}\t{}\n", s.path.display(), s.label, s.split));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut samples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse { line: i + 1, message };
            let fields: Vec<&str> = line.split('\t').collect();
            let [path, label, split] = fields[..] else {
                return Err(parse_err(format!("expected 3 fields, found {}", fields.len())));
            };
            samples.push(Sample {
                path: PathBuf::from(path),
                label: label.parse().map_err(|e: Error| parse_err(e.to_string()))?,
                split: split.parse().map_err(|e: Error| parse_err(e.to_string()))?,
            });
        }
        Ok(DatasetManifest { samples, seed: None })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_tsv(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv())?;
        Ok(())
    }
}

/// Collects every readable image under `root/<label>/`. Samples start in the
/// train split and are ordered by class, then path.
pub fn ingest(root: &Path) -> Result<Ingested> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("dataset root {} is not a directory", root.display())));
    }
    let mut warnings = Vec::new();
    let mut samples = Vec::new();
    let mut dirs: Vec<_> = fs::read_dir(root)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .collect();
    dirs.sort();
    for dir in dirs {
        if !dir.is_dir() {
            continue;
        }
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let Some(label) = AgeClass::from_label(&name) else {
            warnings.push(format!("skipping unknown class directory {}", dir.display()));
            continue;
        };
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for path in files {
            if is_readable_image(&path) {
                samples.push(Sample { path, label, split: Split::Train });
            } else {
                warnings.push(format!("skipping unreadable image {}", path.display()));
            }
        }
    }
    for w in &warnings {
        warn!("{w}");
    }
    if samples.is_empty() {
        return Err(Error::Dataset(format!("no images found under {}", root.display())));
    }
    samples.sort_by(|a, b| (a.label, &a.path).cmp(&(b.label, &b.path)));
    Ok(Ingested {
        manifest: DatasetManifest { samples, seed: None },
        warnings,
    })
}

/// Number of training samples out of `n`: `ceil(ratio * n)`, with a small
/// tolerance so products such as `0.8 * 10` land on the integer.
pub fn train_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Shuffles each class with the seed and sends the first `ceil(ratio * n)`
/// samples to train, the rest to validation. Classes with fewer than two
/// samples stay entirely in train.
pub fn split(manifest: &DatasetManifest, ratio: f64, seed: u64) -> Result<Ingested> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    let mut warnings = Vec::new();
    let mut samples = Vec::with_capacity(manifest.len());
    for class in AgeClass::all() {
        let mut members: Vec<&Sample> = manifest.samples.iter().filter(|s| s.label == class).collect();
        members.sort_by(|a, b| a.path.cmp(&b.path));
        if members.is_empty() {
            continue;
        }
        let n_train = if members.len() < 2 {
            warnings.push(format!("class {class} has {} sample; kept in train", members.len()));
            members.len()
        } else {
            members.shuffle(&mut rng_for(&[seed, stream::SPLIT, class.index() as u64]));
            train_count(members.len(), ratio)
        };
        for (i, s) in members.into_iter().enumerate() {
            samples.push(Sample {
                split: if i < n_train { Split::Train } else { Split::Val },
                ..s.clone()
            });
        }
    }
    for w in &warnings {
        warn!("{w}");
    }
    samples.sort_by(|a, b| (a.label, &a.path).cmp(&(b.label, &b.path)));
    Ok(Ingested {
        manifest: DatasetManifest { samples, seed: Some(seed) },
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::save_image;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn synthetic(per_class: &[usize]) -> DatasetManifest {
        let samples = per_class
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| {
                (0..n).map(move |i| Sample {
                    path: PathBuf::from(format!("c{c}/img{i:03}.png")),
                    label: AgeClass::new(c).unwrap(),
                    split: Split::Train,
                })
            })
            .collect();
        DatasetManifest { samples, seed: None }
    }

    #[test]
    fn ten_samples_split_eight_two() {
        let m = split(&synthetic(&[10]), 0.8, 1).unwrap().manifest;
        assert_eq!(m.counts()[0], [8, 2]);
    }

    #[test]
    fn train_count_uses_ceiling() {
        assert_eq!(train_count(10, 0.8), 8);
        assert_eq!(train_count(11, 0.8), 9);
        assert_eq!(train_count(12, 0.8), 10);
        assert_eq!(train_count(2, 0.5), 1);
        assert_eq!(train_count(3, 0.5), 2);
    }

    #[test]
    fn singleton_class_stays_in_train() {
        let out = split(&synthetic(&[1, 5]), 0.8, 3).unwrap();
        assert_eq!(out.manifest.counts()[0], [1, 0]);
        assert_eq!(out.warnings.len(), 1);
        assert!(split(&synthetic(&[5]), 1.0, 3).is_err());
        assert!(split(&synthetic(&[5]), 0.0, 3).is_err());
    }

    #[test]
    fn manifest_tsv_round_trip() {
        let m = split(&synthetic(&[3, 0, 4, 1, 0, 0, 2, 5]), 0.8, 9).unwrap().manifest;
        let text = m.to_tsv();
        assert!(text.lines().next().unwrap().ends_with("\t0-2\ttrain") || text.contains("\t0-2\tval"));
        let back = DatasetManifest::from_tsv(&text).unwrap();
        assert_eq!(back.samples, m.samples);
        assert!(matches!(
            DatasetManifest::from_tsv("a\t0-2\ttrain\nb\t21-24\tval\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(DatasetManifest::from_tsv("a\t0-2"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn ingest_fixture_tree() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(ingest(dir.path()), Err(Error::Dataset(_))));

        let img = Tensor::filled(&[4, 4, 3], 100.0);
        for label in AgeClass::LABELS {
            let d = dir.path().join(label);
            fs::create_dir(&d).unwrap();
            for i in 0..2 {
                save_image(&d.join(format!("{i}.ppm")), &img).unwrap();
            }
        }
        fs::create_dir(dir.path().join("21-24")).unwrap();
        save_image(&dir.path().join("21-24/x.png"), &img).unwrap();
        fs::write(dir.path().join("0-2/broken.jpg"), b"not an image").unwrap();

        let out = ingest(dir.path()).unwrap();
        assert_eq!(out.manifest.len(), 16);
        for (i, s) in out.manifest.samples.iter().enumerate() {
            assert_eq!(s.label.index(), i / 2);
            assert!(s.path.starts_with(dir.path().join(s.label.label())));
        }
        assert_eq!(out.warnings.len(), 2);
        assert!(out.warnings.iter().any(|w| w.contains("21-24")));
        assert!(out.warnings.iter().any(|w| w.contains("broken.jpg")));
        assert!(ingest(&dir.path().join("missing")).is_err());
    }

    proptest! {
        #[test]
        fn split_is_a_deterministic_per_class_partition(
            per_class in prop::collection::vec(0usize..30, 8),
            ratio in 0.05f64..0.95,
            seed in any::<u64>(),
        ) {
            prop_assume!(per_class.iter().sum::<usize>() > 0);
            let m = synthetic(&per_class);
            let a = split(&m, ratio, seed).unwrap().manifest;
            let b = split(&m, ratio, seed).unwrap().manifest;
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.len(), m.len());
            // Each input path appears exactly once.
            let mut paths: Vec<_> = a.samples.iter().map(|s| &s.path).collect();
            paths.sort();
            paths.dedup();
            prop_assert_eq!(paths.len(), m.len());
            for (c, &[train, val]) in a.counts().iter().enumerate() {
                let n = per_class[c];
                prop_assert_eq!(train + val, n);
                if n >= 2 {
                    prop_assert!((train as f64 - ratio * n as f64).abs() <= 1.0);
                }
            }
        }
    }

    #[test]
    fn hundred_samples_over_eight_classes() {
        let per_class = [13, 12, 13, 12, 13, 12, 13, 12];
        let m = split(&synthetic(&per_class), 0.8, 42).unwrap().manifest;
        for (c, &[train, val]) in m.counts().iter().enumerate() {
            let n = (train + val) as f64;
            assert_eq!(train + val, per_class[c]);
            assert!((train as f64 - 0.8 * n).abs() <= 1.0);
        }
    }
}
