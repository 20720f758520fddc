//! Image I/O and resampling on `H x W x 3` tensors holding values in `[0, 255]`.

use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decodes a PNG, JPEG or PPM file into an RGB tensor.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::Image {
            path: path.to_path_buf(),
            message: "image has a zero dimension".into(),
        });
    }
    Tensor::new(
        vec![h as usize, w as usize, 3],
        rgb.into_raw().into_iter().map(f32::from).collect(),
    )
}

/// True if the file header decodes as a supported image.
pub fn is_readable_image(path: &Path) -> bool {
    image::image_dimensions(path).is_ok_and(|(w, h)| w > 0 && h > 0)
}

fn to_rgb8(img: &Tensor) -> Result<RgbImage> {
    let (h, w, c) = img.dims3()?;
    if c != 3 {
        return Err(Error::InvalidTensor(format!(
            "expected 3 channels, got shape {:?}",
            img.shape()
        )));
    }
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| v.round().clamp(0.0, 255.0) as u8)
        .collect();
    RgbImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::InvalidTensor("image buffer size".into()))
}

/// Writes an RGB tensor, rounding and clamping to 8 bits. The format follows
/// the file extension.
pub fn save_image(path: &Path, img: &Tensor) -> Result<()> {
    let format = ImageFormat::from_path(path).unwrap_or(ImageFormat::Png);
    to_rgb8(img)?
        .save_with_format(path, format)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// PNG bytes of an RGB tensor, rounded and clamped to 8 bits.
pub fn encode_png(img: &Tensor) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    to_rgb8(img)?
        .write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::InvalidTensor(e.to_string()))?;
    Ok(out.into_inner())
}

/// Bilinear sample at continuous pixel coordinates; coordinates outside the
/// image are clamped to the border (edge replication).
#[inline]
pub(crate) fn sample_clamped(img: &Tensor, y: f64, x: f64, c: usize) -> f64 {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let v00 = img.at(y0, x0, c) as f64;
    let v01 = img.at(y0, x1, c) as f64;
    let v10 = img.at(y1, x0, c) as f64;
    let v11 = img.at(y1, x1, c) as f64;
    let top = v00 + (v01 - v00) * fx;
    let bottom = v10 + (v11 - v10) * fx;
    top + (bottom - top) * fy
}

/// Bilinear resize with half-pixel centers: output pixel `d` samples the
/// input at `(d + 0.5) * in / out - 0.5`.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w, c) = img.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot resize to {out_h}x{out_w}"
        )));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for oy in 0..out_h {
        let y = (oy as f64 + 0.5) * sy - 0.5;
        for ox in 0..out_w {
            let x = (ox as f64 + 0.5) * sx - 0.5;
            for ch in 0..c {
                out.push(sample_clamped(img, y, x, ch) as f32);
            }
        }
    }
    Tensor::new(vec![out_h, out_w, c], out)
}

/// Copies the `height x width` window whose top-left corner is `(top, left)`;
/// pixels outside the image are zero.
pub fn crop_zero_padded(
    img: &Tensor,
    top: isize,
    left: isize,
    height: usize,
    width: usize,
) -> Result<Tensor> {
    let (h, w, c) = img.dims3()?;
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument("zero-area crop".into()));
    }
    let mut out = Tensor::zeros(&[height, width, c]);
    for y in 0..height {
        let sy = top + y as isize;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for x in 0..width {
            let sx = left + x as isize;
            if sx < 0 || sx >= w as isize {
                continue;
            }
            let src = (sy as usize * w + sx as usize) * c;
            let dst = (y * width + x) * c;
            out.data_mut()[dst..dst + c].copy_from_slice(&img.data()[src..src + c]);
        }
    }
    Ok(out)
}

/// Exact window copy; the window must lie inside the image.
pub fn crop(img: &Tensor, top: usize, left: usize, height: usize, width: usize) -> Result<Tensor> {
    let (h, w, _) = img.dims3()?;
    if top + height > h || left + width > w {
        return Err(Error::InvalidArgument(format!(
            "crop {height}x{width} at ({top},{left}) exceeds {h}x{w} image"
        )));
    }
    crop_zero_padded(img, top as isize, left as isize, height, width)
}
