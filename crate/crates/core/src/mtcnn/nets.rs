//! Network interfaces for the three cascade stages and their standard CNN
//! implementations (PReLU activations, ceil-mode pooling in R/O-Net).

use std::path::Path;

use rand::Rng;

use super::{ONET_INPUT, PNET_STRIDE, PNET_WINDOW, RNET_INPUT};
use crate::error::{Error, Result};
use crate::model::weights::{load_weights, WeightStore};
use crate::rng::{rng_for, stream};
use crate::tensor::{conv2d, maxpool2d, maxpool2d_ceil, softmax_f64, ConvParams, Tensor};

/// Face probability and box offsets for every cell of a P-Net output grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalMap {
    pub rows: usize,
    pub cols: usize,
    /// Row-major, `rows * cols` entries.
    pub scores: Vec<f32>,
    pub offsets: Vec<[f32; 4]>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefineResult {
    pub score: f32,
    pub offsets: [f32; 4],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OutputNetResult {
    pub score: f32,
    pub offsets: [f32; 4],
    /// Landmark positions relative to the input crop, in `[0, 1]`.
    pub landmarks: [(f32, f32); 5],
}

/// Fully convolutional proposal network with a 12-pixel window and stride 2.
pub trait ProposalNet: Sync {
    fn propose(&self, image: &Tensor) -> Result<ProposalMap>;
}

/// Scores a 24x24 crop.
pub trait RefineNet: Sync {
    fn refine(&self, patch: &Tensor) -> Result<RefineResult>;
}

/// Scores a 48x48 crop and locates five landmarks.
pub trait OutputNet: Sync {
    fn output(&self, patch: &Tensor) -> Result<OutputNetResult>;
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Conv(&'static str, ConvParams),
    Prelu(&'static str, usize),
    Pool { support: usize, stride: usize, ceil: bool },
}

const fn conv(name: &'static str, k: usize, cin: usize, cout: usize) -> Op {
    Op::Conv(name, ConvParams::new(k, cin, cout, 1, 0))
}

const PNET_TRUNK: &[Op] = &[
    conv("conv1", 3, 3, 10),
    Op::Prelu("prelu1", 10),
    Op::Pool { support: 2, stride: 2, ceil: false },
    conv("conv2", 3, 10, 16),
    Op::Prelu("prelu2", 16),
    conv("conv3", 3, 16, 32),
    Op::Prelu("prelu3", 32),
];
const PNET_BRANCHES: &[(&str, ConvParams)] = &[
    ("conv4_1", ConvParams::new(1, 32, 2, 1, 0)),
    ("conv4_2", ConvParams::new(1, 32, 4, 1, 0)),
];

const RNET_TRUNK: &[Op] = &[
    conv("conv1", 3, 3, 28),
    Op::Prelu("prelu1", 28),
    Op::Pool { support: 3, stride: 2, ceil: true },
    conv("conv2", 3, 28, 48),
    Op::Prelu("prelu2", 48),
    Op::Pool { support: 3, stride: 2, ceil: true },
    conv("conv3", 2, 48, 64),
    Op::Prelu("prelu3", 64),
    conv("fc4", 3, 64, 128),
    Op::Prelu("prelu4", 128),
];
const RNET_BRANCHES: &[(&str, ConvParams)] = &[
    ("fc5_1", ConvParams::new(1, 128, 2, 1, 0)),
    ("fc5_2", ConvParams::new(1, 128, 4, 1, 0)),
];

const ONET_TRUNK: &[Op] = &[
    conv("conv1", 3, 3, 32),
    Op::Prelu("prelu1", 32),
    Op::Pool { support: 3, stride: 2, ceil: true },
    conv("conv2", 3, 32, 64),
    Op::Prelu("prelu2", 64),
    Op::Pool { support: 3, stride: 2, ceil: true },
    conv("conv3", 3, 64, 64),
    Op::Prelu("prelu3", 64),
    Op::Pool { support: 2, stride: 2, ceil: true },
    conv("conv4", 2, 64, 128),
    Op::Prelu("prelu4", 128),
    conv("fc5", 3, 128, 256),
    Op::Prelu("prelu5", 256),
];
const ONET_BRANCHES: &[(&str, ConvParams)] = &[
    ("fc6_1", ConvParams::new(1, 256, 2, 1, 0)),
    ("fc6_2", ConvParams::new(1, 256, 4, 1, 0)),
    ("fc6_3", ConvParams::new(1, 256, 10, 1, 0)),
];

/// A trunk of conv/PReLU/pool ops followed by parallel 1x1 output branches.
#[derive(Clone, Debug)]
struct CascadeNet {
    trunk: &'static [Op],
    branches: &'static [(&'static str, ConvParams)],
    weights: WeightStore,
}

impl CascadeNet {
    fn expected_shapes(
        trunk: &[Op],
        branches: &[(&str, ConvParams)],
    ) -> Vec<(String, Vec<usize>)> {
        let mut shapes = Vec::new();
        let convs = trunk
            .iter()
            .filter_map(|op| match op {
                Op::Conv(n, p) => Some((*n, *p)),
                _ => None,
            })
            .chain(branches.iter().copied());
        for (name, p) in convs {
            shapes.push((format!("{name}.weight"), p.weight_shape().to_vec()));
            shapes.push((format!("{name}.bias"), vec![p.num_filts]));
        }
        for op in trunk {
            if let Op::Prelu(name, c) = op {
                shapes.push((format!("{name}.alpha"), vec![*c]));
            }
        }
        shapes
    }

    fn from_store(
        trunk: &'static [Op],
        branches: &'static [(&'static str, ConvParams)],
        weights: WeightStore,
    ) -> Result<Self> {
        let expected = Self::expected_shapes(trunk, branches);
        for (name, _) in weights.iter() {
            if !expected.iter().any(|(n, _)| n == name) {
                return Err(Error::UnknownLayer(name.to_string()));
            }
        }
        for (name, shape) in &expected {
            let t = weights.require(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::DimensionMismatch {
                    layer: name.rsplit_once('.').map_or(name.as_str(), |(l, _)| l).to_string(),
                    expected: shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        Ok(CascadeNet { trunk, branches, weights })
    }

    fn random(
        trunk: &'static [Op],
        branches: &'static [(&'static str, ConvParams)],
        seed: u64,
    ) -> Self {
        let mut weights = WeightStore::new();
        for (i, (name, shape)) in Self::expected_shapes(trunk, branches).into_iter().enumerate() {
            let t = if name.ends_with(".weight") {
                let fan_in: usize = shape[..3].iter().product();
                let limit = (6.0 / fan_in as f64).sqrt();
                let mut rng = rng_for(&[seed, stream::INIT, i as u64]);
                Tensor::from_fn(&shape, |_| rng.gen_range(-limit..limit) as f32)
            } else if name.ends_with(".alpha") {
                Tensor::filled(&shape, 0.25)
            } else {
                Tensor::zeros(&shape)
            };
            weights.insert(name, t);
        }
        CascadeNet { trunk, branches, weights }
    }

    /// Runs the trunk, then every branch; `(x - 127.5) / 128` normalization.
    fn run(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = image.map(|v| (v - 127.5) * 0.0078125);
        for op in self.trunk {
            x = match *op {
                Op::Conv(name, p) => self.conv(&x, name, p)?,
                Op::Prelu(name, _) => {
                    let alpha = self.weights.require(&format!("{name}.alpha"))?.data();
                    let c = alpha.len();
                    let mut y = x;
                    for (i, v) in y.data_mut().iter_mut().enumerate() {
                        if *v < 0.0 {
                            *v *= alpha[i % c];
                        }
                    }
                    y
                }
                Op::Pool { support, stride, ceil: true } => maxpool2d_ceil(&x, support, stride)?,
                Op::Pool { support, stride, ceil: false } => maxpool2d(&x, support, stride)?,
            };
        }
        self.branches
            .iter()
            .map(|(name, p)| self.conv(&x, name, *p))
            .collect()
    }

    fn conv(&self, x: &Tensor, name: &str, p: ConvParams) -> Result<Tensor> {
        conv2d(
            x,
            self.weights.require(&format!("{name}.weight"))?,
            self.weights.require(&format!("{name}.bias"))?,
            p.stride,
            p.pad,
        )
        .map_err(|e| e.in_layer(name))
    }
}

fn face_probability(logits: &[f32]) -> f32 {
    softmax_f64(&[logits[0] as f64, logits[1] as f64])[1] as f32
}

fn offsets(v: &[f32]) -> [f32; 4] {
    [v[0], v[1], v[2], v[3]]
}

macro_rules! cascade_net {
    ($(#[$doc:meta])* $name:ident, $trunk:expr, $branches:expr) => {
        $(#[$doc])*
        #[derive(Clone, Debug)]
        pub struct $name(CascadeNet);

        impl $name {
            pub fn from_store(store: WeightStore) -> Result<Self> {
                CascadeNet::from_store($trunk, $branches, store).map(Self)
            }

            pub fn random(seed: u64) -> Self {
                Self(CascadeNet::random($trunk, $branches, seed))
            }

            pub fn load(path: &Path) -> Result<Self> {
                Self::from_store(load_weights(path)?)
            }

            pub fn weights(&self) -> &WeightStore {
                &self.0.weights
            }

            /// Parameter names and shapes this network expects.
            pub fn parameter_shapes() -> Vec<(String, Vec<usize>)> {
                CascadeNet::expected_shapes($trunk, $branches)
            }
        }
    };
}

cascade_net!(
    /// Proposal network: 12x12 receptive field, stride 2.
    PNet,
    PNET_TRUNK,
    PNET_BRANCHES
);
cascade_net!(
    /// Refinement network on 24x24 crops.
    RNet,
    RNET_TRUNK,
    RNET_BRANCHES
);
cascade_net!(
    /// Output network on 48x48 crops.
    ONet,
    ONET_TRUNK,
    ONET_BRANCHES
);

impl ProposalNet for PNet {
    fn propose(&self, image: &Tensor) -> Result<ProposalMap> {
        let (h, w, _) = image.dims3()?;
        if h < PNET_WINDOW || w < PNET_WINDOW {
            return Err(Error::InvalidArgument(format!(
                "P-Net input {h}x{w} smaller than {PNET_WINDOW}"
            )));
        }
        let out = self.0.run(image)?;
        let (rows, cols, _) = out[0].dims3()?;
        debug_assert_eq!(rows, (h - PNET_WINDOW) / PNET_STRIDE + 1);
        Ok(ProposalMap {
            rows,
            cols,
            scores: out[0].data().chunks_exact(2).map(face_probability).collect(),
            offsets: out[1].data().chunks_exact(4).map(offsets).collect(),
        })
    }
}

fn check_patch(patch: &Tensor, side: usize) -> Result<()> {
    if patch.shape() != [side, side, 3] {
        return Err(Error::ShapeMismatch {
            op: "cascade patch",
            left: patch.shape().to_vec(),
            right: vec![side, side, 3],
        });
    }
    Ok(())
}

impl RefineNet for RNet {
    fn refine(&self, patch: &Tensor) -> Result<RefineResult> {
        check_patch(patch, RNET_INPUT)?;
        let out = self.0.run(patch)?;
        Ok(RefineResult {
            score: face_probability(out[0].data()),
            offsets: offsets(out[1].data()),
        })
    }
}

impl OutputNet for ONet {
    fn output(&self, patch: &Tensor) -> Result<OutputNetResult> {
        check_patch(patch, ONET_INPUT)?;
        let out = self.0.run(patch)?;
        let l = out[2].data();
        let mut landmarks = [(0.0, 0.0); 5];
        for (k, p) in landmarks.iter_mut().enumerate() {
            *p = (l[k], l[k + 5]);
        }
        Ok(OutputNetResult {
            score: face_probability(out[0].data()),
            offsets: offsets(out[1].data()),
            landmarks,
        })
    }
}

pub const PNET_FILE: &str = "pnet.cage";
pub const RNET_FILE: &str = "rnet.cage";
pub const ONET_FILE: &str = "onet.cage";

/// Loads `pnet.cage`, `rnet.cage` and `onet.cage` from `dir`.
pub fn load_cascade(dir: &Path) -> Result<(PNet, RNet, ONet)> {
    Ok((
        PNet::load(&dir.join(PNET_FILE))?,
        RNet::load(&dir.join(RNET_FILE))?,
        ONet::load(&dir.join(ONET_FILE))?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pnet_grid_matches_cell_mapping() {
        let net = PNet::random(1);
        for (h, w) in [(12, 12), (13, 20), (30, 17)] {
            let m = net.propose(&Tensor::filled(&[h, w, 3], 90.0)).unwrap();
            assert_eq!(m.rows, (h - 12) / 2 + 1);
            assert_eq!(m.cols, (w - 12) / 2 + 1);
            assert!(m.scores.iter().all(|s| (0.0..=1.0).contains(s)));
        }
    }

    #[test]
    fn rnet_and_onet_accept_their_crop_sizes() {
        let r = RNet::random(2).refine(&Tensor::filled(&[24, 24, 3], 10.0)).unwrap();
        assert!((0.0..=1.0).contains(&r.score));
        assert!(RNet::random(2).refine(&Tensor::zeros(&[48, 48, 3])).is_err());
        let o = ONet::random(3).output(&Tensor::filled(&[48, 48, 3], 10.0)).unwrap();
        assert!((0.0..=1.0).contains(&o.score));
    }

    #[test]
    fn store_validation() {
        let store = RNet::random(4).weights().clone();
        assert!(RNet::from_store(store.clone()).is_ok());
        assert!(PNet::from_store(store.clone()).is_err());

        let mut extra = store.clone();
        extra.insert("conv9.weight", Tensor::zeros(&[1]));
        assert!(matches!(RNet::from_store(extra), Err(Error::UnknownLayer(_))));

        let mut missing = store;
        missing.remove("prelu2.alpha");
        assert!(matches!(RNet::from_store(missing), Err(Error::MissingTensor(_))));
    }
}
