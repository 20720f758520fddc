//! Dense HWC tensors and the CNN kernels built on them.
//!
//! Storage is 32-bit; convolution reductions accumulate in 64-bit and round
//! once on output so results do not depend on chunking or summation order.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound on the im2col scratch buffer, in f64 elements, per chunk.
const IM2COL_CHUNK: usize = 1 << 19;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} must be non-empty with positive dimensions"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "invalid shape {shape:?}"
        );
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data)
    }

    /// Interprets the tensor as an `H x W x C` image.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(Error::InvalidTensor(format!(
                "expected rank-3 HWC tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Value at `(y, x, c)` of a rank-3 tensor.
    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        let w = self.shape[1];
        let ch = self.shape[2];
        self.data[(y * w + x) * ch + c]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// One convolution layer's geometry: kernel side, input channels, output
/// channels, stride and zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvParams {
    pub support: usize,
    pub filt_dim: usize,
    pub num_filts: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvParams {
    pub const fn new(
        support: usize,
        filt_dim: usize,
        num_filts: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        ConvParams {
            support,
            filt_dim,
            num_filts,
            stride,
            pad,
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.support, self.support, self.filt_dim, self.num_filts]
    }

    pub fn parameter_count(&self) -> usize {
        self.support * self.support * self.filt_dim * self.num_filts + self.num_filts
    }

    /// Spatial output size for an input side, if the window fits.
    pub fn output_len(&self, input: usize) -> Option<usize> {
        conv_output_len(input, self.support, self.stride, self.pad)
    }
}

fn conv_output_len(input: usize, support: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < support {
        None
    } else {
        Some((padded - support) / stride + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// 2-D cross-correlation of an `H x W x Cin` input with `k x k x Cin x Cout`
/// weights, plus a per-output-channel bias.
pub fn conv2d(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (h, w, cin) = input.dims3()?;
    let (k, cout) = match weights.shape[..] {
        [k0, k1, wc, co] if k0 == k1 && wc == cin => (k0, co),
        _ => {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: input.shape.clone(),
                right: weights.shape.clone(),
            })
        }
    };
    if bias.shape != [cout] {
        return Err(Error::ShapeMismatch {
            op: "conv2d bias",
            left: weights.shape.clone(),
            right: bias.shape.clone(),
        });
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
    }
    let (oh, ow) = match (
        conv_output_len(h, k, stride, pad),
        conv_output_len(w, k, stride, pad),
    ) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(Error::ShapeMismatch {
                op: "conv2d window",
                left: input.shape.clone(),
                right: weights.shape.clone(),
            })
        }
    };

    let kdim = k * k * cin;
    let w64: Vec<f64> = weights.data.iter().map(|&v| v as f64).collect();
    let b64: Vec<f64> = bias.data.iter().map(|&v| v as f64).collect();
    let pixels_per_chunk = (IM2COL_CHUNK / kdim.max(1)).clamp(1, oh * ow);

    let mut out = vec![0f32; oh * ow * cout];
    out.par_chunks_mut(pixels_per_chunk * cout)
        .enumerate()
        .for_each(|(chunk, out_chunk)| {
            let p0 = chunk * pixels_per_chunk;
            let m = out_chunk.len() / cout;
            let mut cols = vec![0f64; m * kdim];
            for (p, col) in cols.chunks_exact_mut(kdim).enumerate() {
                let oy = (p0 + p) / ow;
                let ox = (p0 + p) % ow;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = (iy as usize * w + ix as usize) * cin;
                        let dst = (ky * k + kx) * cin;
                        for (d, s) in col[dst..dst + cin]
                            .iter_mut()
                            .zip(&input.data[src..src + cin])
                        {
                            *d = *s as f64;
                        }
                    }
                }
            }
            let mut acc: Vec<f64> = b64.iter().copied().cycle().take(m * cout).collect();
            // SAFETY: all three buffers are dense row-major with the stated
            // dimensions and strides, and `acc` does not alias the inputs.
            unsafe {
                gemm::gemm(
                    m,
                    cout,
                    kdim,
                    acc.as_mut_ptr(),
                    1,
                    cout as isize,
                    true,
                    cols.as_ptr(),
                    1,
                    kdim as isize,
                    w64.as_ptr(),
                    1,
                    cout as isize,
                    1.0,
                    1.0,
                    false,
                    false,
                    false,
                    gemm::Parallelism::None,
                );
            }
            for (o, a) in out_chunk.iter_mut().zip(&acc) {
                *o = *a as f32;
            }
        });

    Tensor::new(vec![oh, ow, cout], out)
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Max pooling with floor-mode output size, `floor((H - support) / stride) + 1`.
pub fn maxpool2d(input: &Tensor, support: usize, stride: usize) -> Result<Tensor> {
    pool(input, support, stride, false)
}

/// Max pooling with ceil-mode output size; trailing windows are clipped to
/// the input.
pub fn maxpool2d_ceil(input: &Tensor, support: usize, stride: usize) -> Result<Tensor> {
    pool(input, support, stride, true)
}

fn pool(input: &Tensor, support: usize, stride: usize, ceil: bool) -> Result<Tensor> {
    let (h, w, c) = input.dims3()?;
    if support == 0 || stride == 0 {
        return Err(Error::InvalidArgument(
            "pool support and stride must be positive".into(),
        ));
    }
    if h < support || w < support {
        return Err(Error::ShapeMismatch {
            op: "maxpool2d window",
            left: input.shape.clone(),
            right: vec![support, support],
        });
    }
    let out_len = |n: usize| {
        let span = n - support;
        if ceil {
            // The last window must start inside the input.
            let o = span.div_ceil(stride) + 1;
            if (o - 1) * stride >= n {
                o - 1
            } else {
                o
            }
        } else {
            span / stride + 1
        }
    };
    let (oh, ow) = (out_len(h), out_len(w));
    let mut out = vec![f32::NEG_INFINITY; oh * ow * c];
    for oy in 0..oh {
        let y_end = (oy * stride + support).min(h);
        for ox in 0..ow {
            let x_end = (ox * stride + support).min(w);
            let dst = &mut out[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            for iy in oy * stride..y_end {
                for ix in ox * stride..x_end {
                    let src = &input.data[(iy * w + ix) * c..(iy * w + ix + 1) * c];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        if s > *d {
                            *d = s;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![oh, ow, c], out)
}

/// Softmax over every element of `logits`, shifted by the maximum.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if !logits.all_finite() {
        return Err(Error::NonFinite("softmax logits"));
    }
    let probs = softmax_f64(&logits.data.iter().map(|&v| v as f64).collect::<Vec<_>>());
    Tensor::new(
        vec![logits.len()],
        probs.into_iter().map(|p| p as f32).collect(),
    )
}

pub(crate) fn softmax_f64(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Inverted dropout. In eval mode this returns an exact copy of the input.
pub fn dropout<R: Rng + ?Sized>(
    input: &Tensor,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor> {
    check_dropout_rate(rate)?;
    match mode {
        Mode::Eval => Ok(input.clone()),
        Mode::Train => {
            let mask = dropout_mask(input.len(), rate, rng)?;
            Ok(Tensor {
                shape: input.shape.clone(),
                data: input
                    .data
                    .iter()
                    .zip(&mask)
                    .map(|(&v, &m)| (v as f64 * m) as f32)
                    .collect(),
            })
        }
    }
}

/// Draws an inverted-dropout mask: each entry is 0 with probability `rate`,
/// otherwise `1 / (1 - rate)`.
pub fn dropout_mask<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Result<Vec<f64>> {
    check_dropout_rate(rate)?;
    let keep = 1.0 / (1.0 - rate);
    Ok((0..len)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect())
}

fn check_dropout_rate(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "dropout rate {rate} must lie in [0, 1)"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Six nested loops, straight from the definition.
    fn naive_conv(input: &Tensor, weights: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (h, w, cin) = input.dims3().unwrap();
        let k = weights.shape()[0];
        let cout = weights.shape()[3];
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[oh, ow, cout]);
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = bias.data()[co] as f64;
                    for ky in 0..k {
                        for kx in 0..k {
                            for ci in 0..cin {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let x = input.at(iy as usize, ix as usize, ci) as f64;
                                let wv = weights.data()[((ky * k + kx) * cin + ci) * cout + co] as f64;
                                acc += x * wv;
                            }
                        }
                    }
                    out.data_mut()[(oy * ow + ox) * cout + co] = acc as f32;
                }
            }
        }
        out
    }

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
    }

    #[test]
    fn conv_vgg_first_layer_shape() {
        let input = Tensor::zeros(&[224, 224, 3]);
        let weights = Tensor::zeros(&[3, 3, 3, 64]);
        let bias = Tensor::zeros(&[64]);
        let out = conv2d(&input, &weights, &bias, 1, 1).unwrap();
        assert_eq!(out.shape(), &[224, 224, 64]);
    }

    #[test]
    fn conv_zero_input_yields_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = Tensor::zeros(&[6, 5, 2]);
        let weights = random_tensor(&[3, 3, 2, 4], &mut rng);
        let bias = Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let out = conv2d(&input, &weights, &bias, 1, 1).unwrap();
        for px in out.data().chunks(4) {
            assert_eq!(px, bias.data());
        }
    }

    #[test]
    fn conv_identity_kernel() {
        let input = Tensor::new(vec![3, 3, 1], (1..=9).map(|v| v as f32).collect()).unwrap();
        let mut weights = Tensor::zeros(&[3, 3, 1, 1]);
        weights.data_mut()[4] = 1.0;
        let out = conv2d(&input, &weights, &Tensor::zeros(&[1]), 1, 1).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn conv_matches_naive_on_fixed_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let input = random_tensor(&[5, 5, 2], &mut rng);
        let weights = random_tensor(&[3, 3, 2, 4], &mut rng);
        let bias = random_tensor(&[4], &mut rng);
        let fast = conv2d(&input, &weights, &bias, 1, 0).unwrap();
        let slow = naive_conv(&input, &weights, &bias, 1, 0);
        assert_eq!(fast.shape(), &[3, 3, 4]);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1e-3), "{a} vs {b}");
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let input = Tensor::zeros(&[4, 4, 3]);
        let weights = Tensor::zeros(&[3, 3, 2, 4]);
        let err = conv2d(&input, &weights, &Tensor::zeros(&[4]), 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[4, 4, 3]") && msg.contains("[3, 3, 2, 4]"), "{msg}");
    }

    #[test]
    fn relu_examples() {
        let t = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&t).data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor::filled(&[4], -3.0);
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
        let pos = Tensor::new(vec![2], vec![0.25, 9.0]).unwrap();
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn maxpool_examples() {
        let big = Tensor::filled(&[224, 224, 64], 1.5);
        let pooled = maxpool2d(&big, 2, 2).unwrap();
        assert_eq!(pooled.shape(), &[112, 112, 64]);
        assert!(pooled.data().iter().all(|&v| v == 1.5));

        let t = Tensor::new(vec![4, 4, 1], (1..=16).map(|v| v as f32).collect()).unwrap();
        let p = maxpool2d(&t, 2, 2).unwrap();
        assert_eq!(p.data(), &[6.0, 8.0, 14.0, 16.0]);
    }

    #[test]
    fn maxpool_rejects_oversized_window() {
        assert!(maxpool2d(&Tensor::zeros(&[1, 4, 1]), 2, 2).is_err());
    }

    #[test]
    fn maxpool_ceil_mode_clips_last_window() {
        let t = Tensor::new(vec![5, 5, 1], (0..25).map(|v| v as f32).collect()).unwrap();
        let p = maxpool2d_ceil(&t, 2, 2).unwrap();
        assert_eq!(p.shape(), &[3, 3, 1]);
        assert_eq!(p.data(), &[6.0, 8.0, 9.0, 16.0, 18.0, 19.0, 21.0, 23.0, 24.0]);
        assert_eq!(maxpool2d(&t, 2, 2).unwrap().shape(), &[2, 2, 1]);

        // Support below stride: no window may start past the edge.
        let q = maxpool2d_ceil(&t, 1, 3).unwrap();
        assert_eq!(q.shape(), &[2, 2, 1]);
        assert_eq!(q.data(), &[0.0, 3.0, 15.0, 18.0]);
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&Tensor::filled(&[8], 3.7)).unwrap();
        assert!(u.data().iter().all(|&p| (p - 0.125).abs() < 1e-7));

        let big = softmax(&Tensor::new(vec![2], vec![1000.0, 1000.0]).unwrap()).unwrap();
        assert_eq!(big.data(), &[0.5, 0.5]);

        let p = softmax(&Tensor::new(vec![2], vec![0.0, 3f32.ln()]).unwrap()).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-7);
        assert!((p.data()[1] - 0.75).abs() < 1e-7);

        assert!(softmax(&Tensor::new(vec![2], vec![f32::NAN, 0.0]).unwrap()).is_err());
    }

    #[test]
    fn dropout_eval_and_zero_rate_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_tensor(&[7, 3], &mut rng);
        assert_eq!(dropout(&t, 0.3, Mode::Eval, &mut rng).unwrap(), t);
        assert_eq!(dropout(&t, 0.0, Mode::Train, &mut rng).unwrap(), t);
        assert!(dropout(&t, 1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = Tensor::filled(&[100_000], 1.0);
        let out = dropout(&t, 0.3, Mode::Train, &mut rng).unwrap();
        let zeros = out.data().iter().filter(|&&v| v == 0.0).count() as f64 / 1e5;
        assert!((zeros - 0.3).abs() < 0.01, "zero fraction {zeros}");
        let survivors: Vec<f32> = out.data().iter().copied().filter(|&v| v != 0.0).collect();
        let mean = survivors.iter().map(|&v| v as f64).sum::<f64>() / survivors.len() as f64;
        assert!((mean - 1.0 / 0.7).abs() < 1e-6);
        let overall = out.data().iter().map(|&v| v as f64).sum::<f64>() / 1e5;
        assert!((overall - 1.0).abs() < 0.02);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(120))]

        #[test]
        fn conv_matches_naive_loops(
            seed in any::<u64>(),
            k in prop::sample::select(vec![1usize, 3, 7]),
            extra_h in 0usize..6,
            extra_w in 0usize..6,
            cin in 1usize..4,
            cout in 1usize..5,
            stride in 1usize..3,
            pad in 0usize..3,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = k + extra_h;
            let w = k + extra_w;
            let input = random_tensor(&[h, w, cin], &mut rng);
            let weights = random_tensor(&[k, k, cin, cout], &mut rng);
            let bias = random_tensor(&[cout], &mut rng);
            let fast = conv2d(&input, &weights, &bias, stride, pad).unwrap();
            let slow = naive_conv(&input, &weights, &bias, stride, pad);
            prop_assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                prop_assert!((a - b).abs() <= 1e-5 * b.abs().max(1e-6) + 1e-7);
            }
        }

        #[test]
        fn softmax_is_shift_invariant(
            steps in prop::collection::vec(-3200i32..3200, 1..12),
            shift in -100i32..100,
        ) {
            // Multiples of 1/64 and integer shifts keep `logit + shift` exact.
            let logits: Vec<f32> = steps.iter().map(|&s| s as f32 / 64.0).collect();
            let shift = shift as f32;
            let base = softmax(&Tensor::new(vec![logits.len()], logits.clone()).unwrap()).unwrap();
            let shifted: Vec<f32> = logits.iter().map(|v| v + shift).collect();
            let moved = softmax(&Tensor::new(vec![logits.len()], shifted).unwrap()).unwrap();
            let sum: f32 = base.data().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            for (a, b) in base.data().iter().zip(moved.data()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn maxpool_scales_with_positive_factor(
            seed in any::<u64>(),
            lambda in 0.01f32..10.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_tensor(&[6, 6, 2], &mut rng);
            let pooled = maxpool2d(&t, 2, 2).unwrap();
            let scaled = maxpool2d(&t.map(|v| v * lambda), 2, 2).unwrap();
            for (a, b) in pooled.data().iter().zip(scaled.data()) {
                prop_assert_eq!(a * lambda, *b);
            }
        }
    }
}
