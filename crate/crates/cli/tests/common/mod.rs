#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use agerange_core::imaging::save_image;
use agerange_core::model::write_store;
use agerange_core::mtcnn::nets::{ONET_FILE, PNET_FILE, RNET_FILE};
use agerange_core::mtcnn::{ONet, PNet, RNet};
use agerange_core::{AgeClass, Tensor, WeightStore};

/// All-zero cascade weights whose face logit bias makes every window a
/// face with zero box offsets. O-Net landmarks land at the box centre.
fn accept_all(shapes: Vec<(String, Vec<usize>)>, score_bias: &str, landmark_bias: Option<&str>) -> WeightStore {
    let mut store = WeightStore::new();
    for (name, shape) in shapes {
        let mut t = Tensor::zeros(&shape);
        if name == score_bias {
            t.data_mut()[1] = 10.0;
        }
        if Some(name.as_str()) == landmark_bias {
            t.data_mut().fill(0.5);
        }
        store.insert(name, t);
    }
    store
}

pub fn write_accept_all_mtcnn(dir: &Path) {
    std::fs::create_dir_all(dir).unwrap();
    write_store(&accept_all(PNet::parameter_shapes(), "conv4_1.bias", None), &dir.join(PNET_FILE)).unwrap();
    write_store(&accept_all(RNet::parameter_shapes(), "fc5_1.bias", None), &dir.join(RNET_FILE)).unwrap();
    write_store(
        &accept_all(ONet::parameter_shapes(), "fc6_1.bias", Some("fc6_3.bias")),
        &dir.join(ONET_FILE),
    )
    .unwrap();
}

/// A 12x12 image: with `min_face = 12` the proposal network sees exactly
/// one window.
pub fn tiny_image(class: usize, index: usize) -> Tensor {
    Tensor::from_fn(&[12, 12, 3], |k| {
        let (pixel, ch) = (k / 3, k % 3);
        ((pixel * (class + 1) * 7 + index * 31 + ch * 50 + class * 29) % 256) as f32
    })
}

/// `per_class` tiny images in each of the eight class directories.
pub fn write_fixture(root: &Path, per_class: usize) -> Vec<PathBuf> {
    let mut paths = Vec::new();
    for (c, label) in AgeClass::LABELS.iter().enumerate() {
        for i in 0..per_class {
            let path = root.join(label).join(format!("img{i}.png"));
            std::fs::create_dir_all(path.parent().unwrap()).unwrap();
            save_image(&path, &tiny_image(c, i)).unwrap();
            paths.push(path);
        }
    }
    paths
}

pub fn agerange(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_agerange"))
        .current_dir(cwd)
        .args(args)
        .output()
        .expect("spawn agerange")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// The smoke configuration: accept-all detector, random backbone, one epoch.
pub const SMOKE_CONFIG: &str = "\
seed = 7
dataset_root = faces
output_dir = out
mtcnn_weights = mtcnn
min_face = 12
split_ratio = 0.5
epochs = 1
batch_size = 4
checkpoint_every = 1
";

/// Runs every stage in `dir` with relative paths, so logs from different
/// directories are comparable byte for byte.
pub fn run_smoke(dir: &Path) -> Result<(), String> {
    write_accept_all_mtcnn(&dir.join("mtcnn"));
    write_fixture(&dir.join("raw"), 2);
    std::fs::write(dir.join("smoke.cfg"), SMOKE_CONFIG).unwrap();
    let stages: [&[&str]; 5] = [
        &["detect", "--input", "raw", "--output", "faces"],
        &["prepare"],
        &["train"],
        &["predict", "--split", "val"],
        &["evaluate"],
    ];
    for stage in stages {
        let mut args = vec!["--config", "smoke.cfg"];
        args.extend_from_slice(stage);
        let out = agerange(dir, &args);
        if !out.status.success() {
            return Err(format!("{stage:?} exited {:?}: {}", out.status.code(), stderr(&out)));
        }
    }
    Ok(())
}

/// Primary outputs of a smoke run, relative to its directory.
pub const SMOKE_OUTPUTS: [&str; 8] = [
    "faces/detections.txt",
    "out/manifest.tsv",
    "out/config.txt",
    "out/checkpoint_epoch001.cage",
    "out/head.cage",
    "out/train_log.tsv",
    "out/predictions.tsv",
    "out/report.tsv",
];
