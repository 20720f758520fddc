//! The five pipeline stages. Each reads the previous stage's artifacts and
//! writes its own through an [`OutputSet`].

use std::collections::HashMap;
use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};

use agerange_core::data::{ingest, split, DatasetManifest, Split};
use agerange_core::evaluation::{evaluate, EvaluationSummary};
use agerange_core::imaging::{encode_png, load_image};
use agerange_core::inference::{
    collect_images, format_prediction_log, parse_prediction_log, predict, predict_batch, AgeModel,
    BatchOutput,
};
use agerange_core::model::{
    build_backbone, build_head, init_weights, load_weights, weights::encode, NUM_CLASSES,
};
use agerange_core::mtcnn::{detect_faces, extract_face_chip, format_detection, load_cascade, ONet, PNet, RNet};
use agerange_core::training::{train, EpochLog, Head};
use agerange_core::{Network, Tensor};

use crate::config::PipelineConfig;
use crate::output::OutputSet;

pub const DETECTION_LOG: &str = "detections.txt";
pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const HEAD_FILE: &str = "head.cage";
pub const TRAIN_LOG: &str = "train_log.tsv";
pub const CONFIG_COPY: &str = "config.txt";
pub const PREDICTION_LOG: &str = "predictions.tsv";
pub const REPORT_TEXT: &str = "report.txt";
pub const REPORT_TSV: &str = "report.tsv";

/// Fails with a message naming the missing artifact and the stage that
/// produces it.
fn require(path: &Path, what: &str, producer: &str) -> Result<()> {
    if !path.exists() {
        bail!("missing {what} {} (produced by `{producer}`)", path.display());
    }
    Ok(())
}

fn cascade(cfg: &PipelineConfig) -> Result<(PNet, RNet, ONet)> {
    require(&cfg.mtcnn_weights, "MTCNN weight directory", "an external converter")?;
    load_cascade(&cfg.mtcnn_weights)
        .with_context(|| format!("loading MTCNN weights from {}", cfg.mtcnn_weights.display()))
}

#[derive(Debug)]
pub struct DetectSummary {
    pub images: usize,
    pub detections: usize,
    pub skipped: usize,
    pub files: Vec<PathBuf>,
}

/// Runs the cascade on every image under `input` and writes one chip per
/// detection, mirroring the input's directory layout, plus the detection
/// log.
pub fn cmd_detect(cfg: &PipelineConfig, input: &Path, output: &Path) -> Result<DetectSummary> {
    let (pnet, rnet, onet) = cascade(cfg)?;
    require(input, "input directory", "the user")?;
    let images = collect_images(input)?;
    let detector = cfg.detector();
    let mut out = OutputSet::new();
    let mut log = String::new();
    let (mut detections, mut skipped) = (0, 0);
    for path in &images {
        let img = match load_image(path) {
            Ok(img) => img,
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                skipped += 1;
                continue;
            }
        };
        let found = detect_faces(&img, &pnet, &rnet, &onet, &detector)?.detections;
        let rel = path.strip_prefix(input).unwrap_or(path);
        let stem = rel.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        for (k, det) in found.iter().enumerate() {
            let chip = extract_face_chip(&img, det, cfg.chip_size)?;
            let chip_path = output
                .join(rel.parent().unwrap_or(Path::new("")))
                .join(format!("{stem}_{k}.png"));
            out.write(&chip_path, &encode_png(&chip)?)?;
            log.push_str(&format_detection(&path.display().to_string(), det));
            log.push('\n');
        }
        detections += found.len();
        info!("{}: {} face(s)", path.display(), found.len());
    }
    out.write(&output.join(DETECTION_LOG), log.as_bytes())?;
    Ok(DetectSummary {
        images: images.len(),
        detections,
        skipped,
        files: out.commit(),
    })
}

#[derive(Debug)]
pub struct PrepareSummary {
    pub manifest: DatasetManifest,
    pub warnings: Vec<String>,
}

/// Ingests `root` and writes the split manifest.
pub fn cmd_prepare(cfg: &PipelineConfig, root: &Path, manifest_path: &Path) -> Result<PrepareSummary> {
    require(root, "dataset root", "`detect` or the user")?;
    let ingested = ingest(root)?;
    let split = split(&ingested.manifest, cfg.split_ratio, cfg.seed)?;
    let mut out = OutputSet::new();
    out.write(manifest_path, split.manifest.to_tsv().as_bytes())?;
    out.commit();
    let mut warnings = ingested.warnings;
    warnings.extend(split.warnings);
    Ok(PrepareSummary {
        manifest: split.manifest,
        warnings,
    })
}

/// The frozen backbone: loaded from `backbone_weights`, or random from the
/// seed when that is empty.
pub fn load_backbone(cfg: &PipelineConfig) -> Result<Network> {
    let spec = build_backbone();
    let store = if cfg.backbone_weights.as_os_str().is_empty() {
        info!("using a random backbone (seed {})", cfg.seed);
        init_weights(&spec, cfg.seed)
    } else {
        require(&cfg.backbone_weights, "backbone weights", "an external converter")?;
        load_weights(&cfg.backbone_weights)
            .with_context(|| format!("loading {}", cfg.backbone_weights.display()))?
    };
    Ok(Network::new(spec, store)?)
}

pub fn initial_head(cfg: &PipelineConfig) -> Result<Head> {
    Ok(Head::from_store(&init_weights(&build_head(NUM_CLASSES)?, cfg.seed))?)
}

#[derive(Debug)]
pub struct TrainSummary {
    pub log: Vec<EpochLog>,
    pub files: Vec<PathBuf>,
}

pub fn train_log_text(log: &[EpochLog]) -> String {
    let mut text = String::from("epoch\tmean_train_loss\tval_exact_acc\n");
    for entry in log {
        text.push_str(&entry.to_line());
        text.push('\n');
    }
    text
}

/// Trains the head on the manifest's train split and writes the final
/// checkpoint, periodic checkpoints, the training log and the effective
/// configuration.
pub fn cmd_train(cfg: &PipelineConfig, manifest_path: &Path, out_dir: &Path) -> Result<TrainSummary> {
    require(manifest_path, "manifest", "prepare")?;
    let manifest = DatasetManifest::read(manifest_path)?;
    let backbone = load_backbone(cfg)?;
    let head = initial_head(cfg)?;
    let mut out = OutputSet::new();
    out.write(&out_dir.join(CONFIG_COPY), cfg.to_text().as_bytes())?;
    let outcome = train(
        &backbone,
        head,
        &manifest,
        &cfg.train(),
        cfg.preprocess(),
        cfg.augment(),
        |entry, head| {
            info!("{}", entry.to_line());
            if cfg.checkpoint_every > 0 && entry.epoch % cfg.checkpoint_every == 0 {
                let path = out_dir.join(format!("checkpoint_epoch{:03}.cage", entry.epoch));
                out.write(&path, &encode(&head.to_store())?)
                    .map_err(|e| agerange_core::Error::Dataset(format!("{e:#}")))?;
            }
            Ok(ControlFlow::Continue(()))
        },
    )?;
    out.write(&out_dir.join(HEAD_FILE), &encode(&outcome.head.to_store())?)?;
    out.write(&out_dir.join(TRAIN_LOG), train_log_text(&outcome.log).as_bytes())?;
    Ok(TrainSummary {
        log: outcome.log,
        files: out.commit(),
    })
}

pub enum PredictSource {
    /// Samples of one split of a manifest, or all of them.
    Manifest { path: PathBuf, split: Option<Split> },
    Directory(PathBuf),
}

/// Five-crop predictions for every input image. With `detect_on_predict`,
/// the highest-scoring face chip is classified instead of the whole image.
pub fn cmd_predict(
    cfg: &PipelineConfig,
    source: &PredictSource,
    head_path: &Path,
    output: &Path,
) -> Result<BatchOutput> {
    require(head_path, "head checkpoint", "train")?;
    let paths = match source {
        PredictSource::Manifest { path, split } => {
            require(path, "manifest", "prepare")?;
            DatasetManifest::read(path)?
                .samples
                .into_iter()
                .filter(|s| split.is_none_or(|want| s.split == want))
                .map(|s| s.path)
                .collect()
        }
        PredictSource::Directory(dir) => {
            require(dir, "input directory", "the user")?;
            collect_images(dir)?
        }
    };
    let head = Head::from_store(&load_weights(head_path)?)
        .with_context(|| format!("loading {}", head_path.display()))?;
    let model = AgeModel::new(load_backbone(cfg)?, head, cfg.preprocess())?;
    let nets = if cfg.detect_on_predict { Some(cascade(cfg)?) } else { None };
    let detector = cfg.detector();

    let batch = predict_batch(&paths, |img: &Tensor| {
        let Some((pnet, rnet, onet)) = &nets else {
            return predict(&model, img);
        };
        let found = detect_faces(img, pnet, rnet, onet, &detector)?.detections;
        match found.iter().max_by(|a, b| a.bbox.score.total_cmp(&b.bbox.score)) {
            Some(best) => predict(&model, &extract_face_chip(img, best, cfg.chip_size)?),
            None => {
                warn!("no face found; classifying the whole image");
                predict(&model, img)
            }
        }
    })?;
    for (path, reason) in &batch.skipped {
        warn!("skipped {}: {reason}", path.display());
    }
    let mut out = OutputSet::new();
    out.write(output, format_prediction_log(&batch.records).as_bytes())?;
    out.commit();
    Ok(batch)
}

/// Scores a prediction log against the manifest labels and writes the text
/// and tab-separated reports.
pub fn cmd_evaluate(predictions: &Path, manifest_path: &Path, out_dir: &Path) -> Result<EvaluationSummary> {
    require(predictions, "prediction log", "predict")?;
    require(manifest_path, "manifest", "prepare")?;
    let records = parse_prediction_log(&fs::read_to_string(predictions)?)
        .with_context(|| format!("reading {}", predictions.display()))?;
    let manifest = DatasetManifest::read(manifest_path)?;
    let labels: HashMap<&Path, usize> = manifest
        .samples
        .iter()
        .map(|s| (s.path.as_path(), s.label.index()))
        .collect();
    let mut preds = Vec::with_capacity(records.len());
    let mut truths = Vec::with_capacity(records.len());
    for r in &records {
        let Some(&truth) = labels.get(r.path.as_path()) else {
            bail!("{} is not in manifest {}", r.path.display(), manifest_path.display());
        };
        preds.push(r.predicted.index());
        truths.push(truth);
    }
    if records.is_empty() {
        bail!("prediction log {} is empty", predictions.display());
    }
    let summary = evaluate(&preds, &truths)?;
    let mut out = OutputSet::new();
    out.write(&out_dir.join(REPORT_TEXT), summary.to_text().as_bytes())?;
    out.write(&out_dir.join(REPORT_TSV), summary.to_tsv().as_bytes())?;
    out.commit();
    Ok(summary)
}
