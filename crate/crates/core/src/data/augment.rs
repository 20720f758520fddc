//! Training-time augmentation: rescale to 256x256, random 224x224 crop,
//! horizontal flip, small rotation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::imaging::{crop, resize_bilinear, sample_clamped};
use crate::tensor::Tensor;

pub const RESCALE_SIZE: usize = 256;
pub const CROP_SIZE: usize = 224;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip_probability: f64,
    /// Rotation angles are drawn uniformly from `[-max, max]` degrees.
    pub max_rotation_degrees: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_probability: 0.5,
            max_rotation_degrees: 10.0,
        }
    }
}

impl AugmentConfig {
    /// The full chain on an image of any size. Every draw comes from `rng`.
    pub fn apply<R: Rng + ?Sized>(&self, img: &Tensor, rng: &mut R) -> Result<Tensor> {
        let scaled = rescale_image(img)?;
        let cropped = random_crop(&scaled, CROP_SIZE, rng)?;
        let flipped = horizontal_flip(&cropped, self.flip_probability, rng)?;
        random_rotate(&flipped, self.max_rotation_degrees, rng)
    }

    /// Deterministic counterpart used for validation.
    pub fn center_crop(&self, img: &Tensor) -> Result<Tensor> {
        center_crop(&rescale_image(img)?)
    }
}

pub fn rescale_image(img: &Tensor) -> Result<Tensor> {
    let (h, w, _) = img.dims3()?;
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!("cannot rescale a {h}x{w} image")));
    }
    resize_bilinear(img, RESCALE_SIZE, RESCALE_SIZE)
}

/// Offsets `(top, left)`, each uniform over every valid position.
pub fn random_crop_offsets<R: Rng + ?Sized>(
    h: usize,
    w: usize,
    size: usize,
    rng: &mut R,
) -> Result<(usize, usize)> {
    if size == 0 || size > h || size > w {
        return Err(Error::InvalidArgument(format!(
            "crop size {size} does not fit a {h}x{w} image"
        )));
    }
    Ok((rng.gen_range(0..=h - size), rng.gen_range(0..=w - size)))
}

pub fn random_crop<R: Rng + ?Sized>(img: &Tensor, size: usize, rng: &mut R) -> Result<Tensor> {
    let (h, w, _) = img.dims3()?;
    let (top, left) = random_crop_offsets(h, w, size, rng)?;
    crop(img, top, left, size, size)
}

pub fn center_crop(img: &Tensor) -> Result<Tensor> {
    let (h, w, _) = img.dims3()?;
    if h < CROP_SIZE || w < CROP_SIZE {
        return Err(Error::InvalidArgument(format!(
            "center crop needs at least {CROP_SIZE}x{CROP_SIZE}, got {h}x{w}"
        )));
    }
    crop(img, (h - CROP_SIZE) / 2, (w - CROP_SIZE) / 2, CROP_SIZE, CROP_SIZE)
}

pub fn flip_horizontal(img: &Tensor) -> Result<Tensor> {
    let (h, w, c) = img.dims3()?;
    let mut out = Vec::with_capacity(img.len());
    for row in img.data().chunks_exact(w * c) {
        for px in row.chunks_exact(c).rev() {
            out.extend_from_slice(px);
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// Flips with probability `p`. One draw is always taken, so the stream
/// position does not depend on the outcome.
pub fn horizontal_flip<R: Rng + ?Sized>(img: &Tensor, p: f64, rng: &mut R) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("flip probability {p} outside [0, 1]")));
    }
    if rng.gen::<f64>() < p {
        flip_horizontal(img)
    } else {
        Ok(img.clone())
    }
}

/// Rotates about the image centre with bilinear sampling; pixels that map
/// outside the source take the nearest edge value.
pub fn rotate(img: &Tensor, angle_degrees: f64) -> Result<Tensor> {
    if angle_degrees.is_nan() || angle_degrees.abs() > 45.0 {
        return Err(Error::InvalidArgument(format!("rotation angle {angle_degrees} exceeds 45 degrees")));
    }
    let (h, w, c) = img.dims3()?;
    if angle_degrees == 0.0 {
        return Ok(img.clone());
    }
    let (s, co) = angle_degrees.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(img.len());
    for y in 0..h {
        let dy = y as f64 - cy;
        for x in 0..w {
            let dx = x as f64 - cx;
            let sx = cx + co * dx - s * dy;
            let sy = cy + s * dx + co * dy;
            for ch in 0..c {
                out.push(sample_clamped(img, sy, sx, ch) as f32);
            }
        }
    }
    Tensor::new(vec![h, w, c], out)
}

pub fn random_rotate<R: Rng + ?Sized>(img: &Tensor, max_degrees: f64, rng: &mut R) -> Result<Tensor> {
    if !(0.0..=45.0).contains(&max_degrees) {
        return Err(Error::InvalidArgument(format!("rotation range {max_degrees} outside [0, 45]")));
    }
    let angle = if max_degrees > 0.0 {
        rng.gen_range(-max_degrees..=max_degrees)
    } else {
        0.0
    };
    rotate(img, angle)
}
