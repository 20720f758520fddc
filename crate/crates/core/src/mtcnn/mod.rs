//! Three-stage cascaded face detection (P-Net, R-Net, O-Net).
//!
//! The proposal network scans an image pyramid fully convolutionally; its
//! candidates are square-padded, resampled and re-scored by the refinement
//! network, and the output network adds five facial landmarks. Each stage
//! applies bounding-box regression and non-maximum suppression. Networks are
//! supplied through the traits in [`nets`], so every stage runs equally well
//! on trained weights or on test stubs.

pub mod nets;

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imaging::{crop_zero_padded, resize_bilinear};
use crate::tensor::Tensor;
pub use nets::{
    load_cascade, ONet, OutputNet, OutputNetResult, PNet, ProposalMap, ProposalNet, RNet,
    RefineNet, RefineResult,
};

/// P-Net receptive field and output stride, in pixels.
pub const PNET_WINDOW: usize = 12;
pub const PNET_STRIDE: usize = 2;
pub const RNET_INPUT: usize = 24;
pub const ONET_INPUT: usize = 48;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
    pub score: f32,
}

impl BoundingBox {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32, score: f32) -> Self {
        BoundingBox { x1, y1, x2, y2, score }
    }

    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f32 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x2 > self.x1
            && self.y2 > self.y1
            && (0.0..=1.0).contains(&self.score)
            && [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
    }

    fn with_score(mut self, score: f32) -> Self {
        self.score = score;
        self
    }
}

/// Eyes, nose, mouth corners in original-image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Landmarks(pub [(f32, f32); 5]);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    P,
    R,
    O,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    /// Present only on output-stage detections.
    pub landmarks: Option<Landmarks>,
    pub stage: Stage,
}

#[derive(Clone, Debug)]
pub struct PyramidLevel {
    pub scale: f64,
    pub image: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OverlapMode {
    /// Intersection over union.
    Union,
    /// Intersection over the smaller area.
    Min,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectorConfig {
    pub min_face: f64,
    pub factor: f64,
    pub pnet_threshold: f32,
    pub rnet_threshold: f32,
    pub onet_threshold: f32,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            min_face: 20.0,
            factor: 0.709,
            pnet_threshold: 0.6,
            rnet_threshold: 0.7,
            onet_threshold: 0.7,
        }
    }
}

/// Pyramid scales for an `h x w` image: `12 / min_face`, then repeatedly
/// multiplied by `factor` while the scaled short side stays at least 12.
pub fn pyramid_scales(h: usize, w: usize, min_face: f64, factor: f64) -> Result<Vec<f64>> {
    if min_face < PNET_WINDOW as f64 {
        return Err(Error::InvalidArgument(format!(
            "min_face {min_face} must be at least {PNET_WINDOW}"
        )));
    }
    if !(factor > 0.0 && factor < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "pyramid factor {factor} must lie in (0, 1)"
        )));
    }
    let short = h.min(w) as f64;
    let mut scale = PNET_WINDOW as f64 / min_face;
    let mut scales = Vec::new();
    while short * scale >= PNET_WINDOW as f64 {
        scales.push(scale);
        scale *= factor;
    }
    Ok(scales)
}

pub fn build_pyramid(image: &Tensor, min_face: f64, factor: f64) -> Result<Vec<PyramidLevel>> {
    let (h, w, _) = image.dims3()?;
    pyramid_scales(h, w, min_face, factor)?
        .into_iter()
        .map(|scale| {
            let sh = (h as f64 * scale).ceil() as usize;
            let sw = (w as f64 * scale).ceil() as usize;
            Ok(PyramidLevel {
                scale,
                image: resize_bilinear(image, sh, sw)?,
            })
        })
        .collect()
}

pub fn iou(a: &BoundingBox, b: &BoundingBox, mode: OverlapMode) -> f32 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let denom = match mode {
        OverlapMode::Union => a.area() + b.area() - inter,
        OverlapMode::Min => a.area().min(b.area()),
    };
    if denom <= 0.0 {
        0.0
    } else {
        (inter / denom).clamp(0.0, 1.0)
    }
}

/// Descending score, ties broken by coordinates, so the result never depends
/// on input order.
pub(crate) fn rank_order(a: &BoundingBox, b: &BoundingBox) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.x1.total_cmp(&b.x1))
        .then(a.y1.total_cmp(&b.y1))
        .then(a.x2.total_cmp(&b.x2))
        .then(a.y2.total_cmp(&b.y2))
}

/// Greedy non-maximum suppression: keep the best remaining box and drop
/// every box overlapping it by more than `threshold`.
pub fn nms(boxes: &[BoundingBox], threshold: f32, mode: OverlapMode) -> Vec<BoundingBox> {
    let mut sorted = boxes.to_vec();
    sorted.sort_by(rank_order);
    let mut suppressed = vec![false; sorted.len()];
    let mut kept = Vec::new();
    for i in 0..sorted.len() {
        if suppressed[i] {
            continue;
        }
        kept.push(sorted[i]);
        for j in i + 1..sorted.len() {
            if !suppressed[j] && iou(&sorted[i], &sorted[j], mode) > threshold {
                suppressed[j] = true;
            }
        }
    }
    kept
}

/// Shifts each edge by its offset times the box width or height.
pub fn apply_bbox_regression(b: &BoundingBox, offsets: [f32; 4]) -> Result<BoundingBox> {
    let (w, h) = (b.width(), b.height());
    let out = BoundingBox {
        x1: b.x1 + offsets[0] * w,
        y1: b.y1 + offsets[1] * h,
        x2: b.x2 + offsets[2] * w,
        y2: b.y2 + offsets[3] * h,
        score: b.score,
    };
    if out.x2 > out.x1 && out.y2 > out.y1 && out.x1.is_finite() && out.y2.is_finite() {
        Ok(out)
    } else {
        Err(Error::DegenerateBox)
    }
}

/// Image-space window of P-Net output cell `(row, col)` at pyramid `scale`.
pub fn map_pnet_cell(row: usize, col: usize, scale: f64) -> BoundingBox {
    let s = PNET_STRIDE as f64;
    let win = PNET_WINDOW as f64;
    BoundingBox {
        x1: (col as f64 * s / scale) as f32,
        y1: (row as f64 * s / scale) as f32,
        x2: ((col as f64 * s + win) / scale) as f32,
        y2: ((row as f64 * s + win) / scale) as f32,
        score: 0.0,
    }
}

/// Grows the shorter side about the centre until the box is square.
pub fn square_pad(b: &BoundingBox) -> BoundingBox {
    let (w, h) = (b.width(), b.height());
    if w == h {
        return *b;
    }
    let side = w.max(h);
    let cx = b.x1 + w * 0.5;
    let cy = b.y1 + h * 0.5;
    let (x1, y1) = if w < h {
        (cx - side * 0.5, b.y1)
    } else {
        (b.x1, cy - side * 0.5)
    };
    BoundingBox {
        x1,
        y1,
        x2: x1 + side,
        y2: y1 + side,
        score: b.score,
    }
}

/// Crops the box (rounded to whole pixels, zero-filled outside the image)
/// and resamples it to `out_h x out_w`.
fn crop_resample(image: &Tensor, b: &BoundingBox, out_h: usize, out_w: usize) -> Result<Tensor> {
    let left = b.x1.round();
    let top = b.y1.round();
    let width = (b.x2.round() - left) as isize;
    let height = (b.y2.round() - top) as isize;
    if width <= 0 || height <= 0 {
        return Err(Error::InvalidArgument(format!("zero-area crop for box {b:?}")));
    }
    let patch = crop_zero_padded(image, top as isize, left as isize, height as usize, width as usize)?;
    resize_bilinear(&patch, out_h, out_w)
}

fn sort_and_nms(mut boxes: Vec<BoundingBox>, threshold: f32, mode: OverlapMode) -> Vec<BoundingBox> {
    boxes.sort_by(rank_order);
    nms(&boxes, threshold, mode)
}

/// Proposal stage over the whole pyramid.
pub fn pnet_stage(
    image: &Tensor,
    net: &dyn ProposalNet,
    threshold: f32,
    min_face: f64,
    factor: f64,
) -> Result<Vec<BoundingBox>> {
    let levels = build_pyramid(image, min_face, factor)?;
    let per_level: Vec<Vec<BoundingBox>> = levels
        .par_iter()
        .map(|level| {
            let map = net.propose(&level.image)?;
            let mut boxes = Vec::new();
            for row in 0..map.rows {
                for col in 0..map.cols {
                    let i = row * map.cols + col;
                    let score = map.scores[i];
                    if score <= threshold {
                        continue;
                    }
                    let cell = map_pnet_cell(row, col, level.scale).with_score(score);
                    if let Ok(b) = apply_bbox_regression(&cell, map.offsets[i]) {
                        boxes.push(b);
                    }
                }
            }
            Ok(sort_and_nms(boxes, 0.5, OverlapMode::Union))
        })
        .collect::<Result<_>>()?;
    Ok(sort_and_nms(per_level.concat(), 0.7, OverlapMode::Union))
}

/// Refinement stage: re-scores square-padded 24x24 crops of each candidate.
pub fn rnet_stage(
    image: &Tensor,
    candidates: &[BoundingBox],
    net: &dyn RefineNet,
    threshold: f32,
) -> Result<Vec<BoundingBox>> {
    let scored: Vec<Option<BoundingBox>> = candidates
        .par_iter()
        .map(|c| {
            let sq = square_pad(c);
            let patch = match crop_resample(image, &sq, RNET_INPUT, RNET_INPUT) {
                Ok(p) => p,
                Err(_) => return Ok(None),
            };
            let out = net.refine(&patch)?;
            if out.score <= threshold {
                return Ok(None);
            }
            Ok(apply_bbox_regression(&sq.with_score(out.score), out.offsets).ok())
        })
        .collect::<Result<_>>()?;
    Ok(sort_and_nms(
        scored.into_iter().flatten().collect(),
        0.7,
        OverlapMode::Union,
    ))
}

/// Output stage: final boxes plus landmarks decoded from box-relative
/// `[0, 1]` coordinates. Landmarks are clamped into the regressed box.
pub fn onet_stage(
    image: &Tensor,
    candidates: &[BoundingBox],
    net: &dyn OutputNet,
    threshold: f32,
) -> Result<Vec<Detection>> {
    let scored: Vec<Option<Detection>> = candidates
        .par_iter()
        .map(|c| {
            let sq = square_pad(c);
            let patch = match crop_resample(image, &sq, ONET_INPUT, ONET_INPUT) {
                Ok(p) => p,
                Err(_) => return Ok(None),
            };
            let out = net.output(&patch)?;
            if out.score <= threshold {
                return Ok(None);
            }
            let Ok(bbox) = apply_bbox_regression(&sq.with_score(out.score), out.offsets) else {
                return Ok(None);
            };
            let mut points = [(0.0, 0.0); 5];
            for (k, p) in points.iter_mut().enumerate() {
                let x = sq.x1 + out.landmarks[k].0 * sq.width();
                let y = sq.y1 + out.landmarks[k].1 * sq.height();
                *p = (x.clamp(bbox.x1, bbox.x2), y.clamp(bbox.y1, bbox.y2));
            }
            Ok(Some(Detection {
                bbox,
                landmarks: Some(Landmarks(points)),
                stage: Stage::O,
            }))
        })
        .collect::<Result<_>>()?;
    let detections: Vec<Detection> = scored.into_iter().flatten().collect();
    let kept = sort_and_nms(
        detections.iter().map(|d| d.bbox).collect(),
        0.7,
        OverlapMode::Min,
    );
    // Boxes are unique per detection after regression except in degenerate
    // duplicates; match on exact equality and take the first.
    let mut used = vec![false; detections.len()];
    Ok(kept
        .into_iter()
        .filter_map(|b| {
            let i = (0..detections.len()).find(|&i| !used[i] && detections[i].bbox == b)?;
            used[i] = true;
            Some(detections[i].clone())
        })
        .collect())
}

/// Counts surviving each stage, plus the final detections.
#[derive(Clone, Debug, Default)]
pub struct CascadeResult {
    pub proposals: usize,
    pub refined: usize,
    pub detections: Vec<Detection>,
}

pub fn detect_faces(
    image: &Tensor,
    pnet: &dyn ProposalNet,
    rnet: &dyn RefineNet,
    onet: &dyn OutputNet,
    config: &DetectorConfig,
) -> Result<CascadeResult> {
    let proposals = pnet_stage(image, pnet, config.pnet_threshold, config.min_face, config.factor)?;
    if proposals.is_empty() {
        return Ok(CascadeResult::default());
    }
    let refined = rnet_stage(image, &proposals, rnet, config.rnet_threshold)?;
    let detections = if refined.is_empty() {
        Vec::new()
    } else {
        onet_stage(image, &refined, onet, config.onet_threshold)?
    };
    Ok(CascadeResult {
        proposals: proposals.len(),
        refined: refined.len(),
        detections,
    })
}

/// Square-padded face crop resampled to `out_size x out_size`.
pub fn extract_face_chip(image: &Tensor, detection: &Detection, out_size: usize) -> Result<Tensor> {
    if out_size == 0 {
        return Err(Error::InvalidArgument("chip size must be positive".into()));
    }
    crop_resample(image, &square_pad(&detection.bbox), out_size, out_size)
}

/// One detection-log line: `path x1 y1 x2 y2 score lx1 ly1 ... lx5 ly5`.
/// Detections without landmarks repeat the box centre.
pub fn format_detection(path: &str, d: &Detection) -> String {
    let b = &d.bbox;
    let mut line = format!(
        "{path} {:.2} {:.2} {:.2} {:.2} {:.6}",
        b.x1, b.y1, b.x2, b.y2, b.score
    );
    let centre = ((b.x1 + b.x2) * 0.5, (b.y1 + b.y2) * 0.5);
    let points = d.landmarks.map_or([centre; 5], |l| l.0);
    for (x, y) in points {
        write!(line, " {x:.2} {y:.2}").unwrap();
    }
    line
}

/// Parses a line written by [`format_detection`]. The path may not contain
/// spaces.
pub fn parse_detection(line: &str) -> Result<(String, Detection)> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    let bad = |message: String| Error::Parse { line: 0, message };
    if fields.len() != 16 {
        return Err(bad(format!("expected 16 fields, found {}", fields.len())));
    }
    let nums: Vec<f32> = fields[1..]
        .iter()
        .map(|f| f.parse::<f32>().map_err(|e| bad(format!("{f:?}: {e}"))))
        .collect::<Result<_>>()?;
    let mut points = [(0.0, 0.0); 5];
    for (k, p) in points.iter_mut().enumerate() {
        *p = (nums[5 + 2 * k], nums[6 + 2 * k]);
    }
    Ok((
        fields[0].to_string(),
        Detection {
            bbox: BoundingBox::new(nums[0], nums[1], nums[2], nums[3], nums[4]),
            landmarks: Some(Landmarks(points)),
            stage: Stage::O,
        },
    ))
}
