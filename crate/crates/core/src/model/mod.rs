//! The VGG-Face convolutional backbone, the age-classification head, and
//! a generic executor for any [`NetworkSpec`].

pub mod weights;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};
use crate::tensor::{self, ConvParams, Mode, Tensor};
pub use weights::{load_weights, write_store, WeightStore};

/// Backbone input contract.
pub const INPUT_SIZE: usize = 224;
pub const NUM_CLASSES: usize = 8;
pub const HEAD_DROPOUT: f64 = 0.3;
/// Index of the first head layer; everything before it is frozen.
pub const HEAD_START: usize = 32;

/// The eight ordered age ranges.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AgeClass(u8);

impl AgeClass {
    pub const LABELS: [&'static str; NUM_CLASSES] =
        ["0-2", "4-6", "8-13", "15-20", "25-32", "38-43", "48-53", "60+"];

    pub fn new(index: usize) -> Result<Self> {
        if index < NUM_CLASSES {
            Ok(AgeClass(index as u8))
        } else {
            Err(Error::InvalidArgument(format!(
                "age class index {index} out of range 0..{NUM_CLASSES}"
            )))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn label(self) -> &'static str {
        Self::LABELS[self.index()]
    }

    /// Single-letter tag used on confusion-matrix axes (`a` = 0-2 ... `h` = 60+).
    pub fn letter(self) -> char {
        (b'a' + self.0) as char
    }

    pub fn from_label(label: &str) -> Option<Self> {
        Self::LABELS
            .iter()
            .position(|&l| l == label)
            .map(|i| AgeClass(i as u8))
    }

    pub fn all() -> impl Iterator<Item = AgeClass> {
        (0..NUM_CLASSES as u8).map(AgeClass)
    }
}

impl fmt::Display for AgeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for AgeClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::from_label(s).ok_or_else(|| Error::InvalidArgument(format!("unknown age class {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerKind {
    Conv(ConvParams),
    Relu,
    Mpool { support: usize, stride: usize },
    Dropout { rate: f64 },
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub index: usize,
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn conv_params(&self) -> Option<ConvParams> {
        match self.kind {
            LayerKind::Conv(p) => Some(p),
            _ => None,
        }
    }

    pub fn weight_key(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_key(&self) -> String {
        format!("{}.bias", self.name)
    }

    /// Output shape for an `H x W x C` (or flat, for softmax) input.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |right: Vec<usize>| {
            Error::ShapeMismatch {
                op: "layer input",
                left: input.to_vec(),
                right,
            }
            .in_layer(&self.name)
        };
        match self.kind {
            LayerKind::Conv(p) => match *input {
                [h, w, c] if c == p.filt_dim => match (p.output_len(h), p.output_len(w)) {
                    (Some(oh), Some(ow)) => Ok(vec![oh, ow, p.num_filts]),
                    _ => Err(mismatch(p.weight_shape().to_vec())),
                },
                _ => Err(mismatch(p.weight_shape().to_vec())),
            },
            LayerKind::Mpool { support, stride } => match *input {
                [h, w, c] if h >= support && w >= support => Ok(vec![
                    (h - support) / stride + 1,
                    (w - support) / stride + 1,
                    c,
                ]),
                _ => Err(mismatch(vec![support, support])),
            },
            LayerKind::Relu | LayerKind::Dropout { .. } => Ok(input.to_vec()),
            LayerKind::Softmax => Ok(vec![input.iter().product()]),
        }
    }
}

/// An ordered layer list with a frozen/trainable boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    /// Layers whose `index` is below this value are frozen.
    pub trainable_from: usize,
}

struct Block {
    stage: usize,
    convs: usize,
    filt_dim: usize,
    num_filts: usize,
}

const VGG_BLOCKS: [Block; 5] = [
    Block { stage: 1, convs: 2, filt_dim: 3, num_filts: 64 },
    Block { stage: 2, convs: 2, filt_dim: 64, num_filts: 128 },
    Block { stage: 3, convs: 3, filt_dim: 128, num_filts: 256 },
    Block { stage: 4, convs: 3, filt_dim: 256, num_filts: 512 },
    Block { stage: 5, convs: 3, filt_dim: 512, num_filts: 512 },
];

/// Layers 1 to 31 of VGG-Face: thirteen 3x3 convolutions with ReLU, five
/// 2x2 max-pools. Takes a 224x224x3 input to a 7x7x512 feature map.
pub fn build_backbone() -> NetworkSpec {
    let mut layers = Vec::with_capacity(HEAD_START - 1);
    let mut push = |name: String, kind| {
        let index = layers.len() + 1;
        layers.push(LayerSpec { index, name, kind });
    };
    for block in &VGG_BLOCKS {
        for i in 1..=block.convs {
            let filt_dim = if i == 1 { block.filt_dim } else { block.num_filts };
            push(
                format!("conv{}_{}", block.stage, i),
                LayerKind::Conv(ConvParams::new(3, filt_dim, block.num_filts, 1, 1)),
            );
            push(format!("relu{}_{}", block.stage, i), LayerKind::Relu);
        }
        push(
            format!("pool{}", block.stage),
            LayerKind::Mpool { support: 2, stride: 2 },
        );
    }
    NetworkSpec {
        input_shape: vec![INPUT_SIZE, INPUT_SIZE, 3],
        layers,
        trainable_from: HEAD_START,
    }
}

/// The replacement classifier on top of pool5: FC 1000, ReLU, dropout 0.3,
/// FC 100, ReLU, FC `num_classes`, softmax. Fully connected layers are
/// expressed as valid convolutions, the first one spanning the full 7x7 map.
pub fn build_head(num_classes: usize) -> Result<NetworkSpec> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "head needs at least 2 classes, got {num_classes}"
        )));
    }
    Ok(head_spec(HeadShape {
        input_side: 7,
        input_channels: 512,
        hidden: [1000, 100],
        classes: num_classes,
        dropout: HEAD_DROPOUT,
    }))
}

/// Dimensions of a head network; the miniature variants used in tests share
/// the same layer pattern.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadShape {
    pub input_side: usize,
    pub input_channels: usize,
    pub hidden: [usize; 2],
    pub classes: usize,
    pub dropout: f64,
}

impl HeadShape {
    pub fn input_len(&self) -> usize {
        self.input_side * self.input_side * self.input_channels
    }
}

pub const HEAD_LAYERS: [&str; 3] = ["fc6", "fc8", "fc_age"];

pub fn head_spec(shape: HeadShape) -> NetworkSpec {
    let [h1, h2] = shape.hidden;
    let kinds = [
        ("fc6", LayerKind::Conv(ConvParams::new(shape.input_side, shape.input_channels, h1, 1, 0))),
        ("relu6", LayerKind::Relu),
        ("dropout7", LayerKind::Dropout { rate: shape.dropout }),
        ("fc8", LayerKind::Conv(ConvParams::new(1, h1, h2, 1, 0))),
        ("relu7", LayerKind::Relu),
        ("fc_age", LayerKind::Conv(ConvParams::new(1, h2, shape.classes, 1, 0))),
        ("prob", LayerKind::Softmax),
    ];
    NetworkSpec {
        input_shape: vec![shape.input_side, shape.input_side, shape.input_channels],
        layers: kinds
            .into_iter()
            .enumerate()
            .map(|(i, (name, kind))| LayerSpec {
                index: HEAD_START + i,
                name: name.to_string(),
                kind,
            })
            .collect(),
        trainable_from: HEAD_START,
    }
}

/// Backbone followed by the head.
pub fn build_full_model(num_classes: usize) -> Result<NetworkSpec> {
    let mut spec = build_backbone();
    spec.layers.extend(build_head(num_classes)?.layers);
    Ok(spec)
}

impl NetworkSpec {
    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn is_frozen(&self, layer: &LayerSpec) -> bool {
        layer.index < self.trainable_from
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = (&LayerSpec, ConvParams)> {
        self.layers
            .iter()
            .filter_map(|l| l.conv_params().map(|p| (l, p)))
    }

    pub fn parameter_count(&self) -> usize {
        self.conv_layers().map(|(_, p)| p.parameter_count()).sum()
    }

    /// Shape after every layer, computed without running the network.
    pub fn shape_trace(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let mut shape = self.input_shape.clone();
        let mut trace = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = layer.output_shape(&shape)?;
            trace.push((layer.name.clone(), shape.clone()));
        }
        Ok(trace)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self
            .shape_trace()?
            .pop()
            .map(|(_, s)| s)
            .unwrap_or_else(|| self.input_shape.clone()))
    }

    /// Checks that `store` holds exactly this network's parameters.
    pub fn check_weights(&self, store: &WeightStore) -> Result<()> {
        for (name, tensor) in store.iter() {
            let layer_name = name.rsplit_once('.').map_or(name, |(l, _)| l);
            let layer = self
                .layer(layer_name)
                .filter(|l| l.conv_params().is_some())
                .ok_or_else(|| Error::UnknownLayer(layer_name.to_string()))?;
            let p = layer.conv_params().unwrap();
            let expected = if name == layer.weight_key() {
                p.weight_shape().to_vec()
            } else if name == layer.bias_key() {
                vec![p.num_filts]
            } else {
                return Err(Error::UnknownLayer(name.to_string()));
            };
            if tensor.shape() != expected.as_slice() {
                return Err(Error::DimensionMismatch {
                    layer: layer.name.clone(),
                    expected,
                    found: tensor.shape().to_vec(),
                });
            }
        }
        for (layer, _) in self.conv_layers() {
            for key in [layer.weight_key(), layer.bias_key()] {
                if store.get(&key).is_none() {
                    return Err(Error::MissingTensor(key));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("network spec serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })
    }
}

/// Validates the store against `spec` and writes it in the portable format.
pub fn save_weights(spec: &NetworkSpec, store: &WeightStore, path: &std::path::Path) -> Result<()> {
    spec.check_weights(store)?;
    write_store(store, path)
}

/// Parameters for `spec`: frozen layers get He-uniform weights, trainable
/// layers Glorot-uniform; all biases are zero.
pub fn init_weights(spec: &NetworkSpec, seed: u64) -> WeightStore {
    let mut store = WeightStore::new();
    for (layer, p) in spec.conv_layers() {
        let fan_in = p.support * p.support * p.filt_dim;
        let limit = if spec.is_frozen(layer) {
            (6.0 / fan_in as f64).sqrt()
        } else {
            (6.0 / (fan_in + p.num_filts) as f64).sqrt()
        };
        let mut rng = rng_for(&[seed, stream::INIT, layer.index as u64]);
        let w = Tensor::from_fn(&p.weight_shape(), |_| rng.gen_range(-limit..limit) as f32);
        store.insert(layer.weight_key(), w);
        store.insert(layer.bias_key(), Tensor::zeros(&[p.num_filts]));
    }
    store
}

pub fn zero_weights(spec: &NetworkSpec) -> WeightStore {
    let mut store = WeightStore::new();
    for (layer, p) in spec.conv_layers() {
        store.insert(layer.weight_key(), Tensor::zeros(&p.weight_shape()));
        store.insert(layer.bias_key(), Tensor::zeros(&[p.num_filts]));
    }
    store
}

/// Layer names with their output shapes, in execution order.
pub type ShapeTrace = Vec<(String, Vec<usize>)>;

/// A spec bound to validated parameters.
#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    weights: WeightStore,
}

impl Network {
    pub fn new(spec: NetworkSpec, weights: WeightStore) -> Result<Self> {
        spec.shape_trace()?;
        spec.check_weights(&weights)?;
        Ok(Network { spec, weights })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn weights(&self) -> &WeightStore {
        &self.weights
    }

    pub fn into_parts(self) -> (NetworkSpec, WeightStore) {
        (self.spec, self.weights)
    }

    pub fn forward<R: Rng + ?Sized>(&self, input: &Tensor, mode: Mode, rng: &mut R) -> Result<Tensor> {
        self.forward_with(input, mode, rng, |_, _| {})
    }

    /// Like [`Network::forward`], also returning each layer's output shape.
    pub fn forward_trace<R: Rng + ?Sized>(
        &self,
        input: &Tensor,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Tensor, ShapeTrace)> {
        let mut trace = Vec::new();
        let out = self.forward_with(input, mode, rng, |layer, t| {
            trace.push((layer.name.clone(), t.shape().to_vec()))
        })?;
        Ok((out, trace))
    }

    fn forward_with<R: Rng + ?Sized>(
        &self,
        input: &Tensor,
        mode: Mode,
        rng: &mut R,
        mut observe: impl FnMut(&LayerSpec, &Tensor),
    ) -> Result<Tensor> {
        if input.shape() != self.spec.input_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "network input",
                left: input.shape().to_vec(),
                right: self.spec.input_shape.clone(),
            });
        }
        let mut x = input.clone();
        for layer in &self.spec.layers {
            x = self
                .apply(layer, &x, mode, rng)
                .map_err(|e| e.in_layer(&layer.name))?;
            observe(layer, &x);
        }
        Ok(x)
    }

    fn apply<R: Rng + ?Sized>(
        &self,
        layer: &LayerSpec,
        x: &Tensor,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Tensor> {
        match layer.kind {
            LayerKind::Conv(p) => tensor::conv2d(
                x,
                self.weights.require(&layer.weight_key())?,
                self.weights.require(&layer.bias_key())?,
                p.stride,
                p.pad,
            ),
            LayerKind::Relu => Ok(tensor::relu(x)),
            LayerKind::Mpool { support, stride } => tensor::maxpool2d(x, support, stride),
            LayerKind::Dropout { rate } => tensor::dropout(x, rate, mode, rng),
            LayerKind::Softmax => tensor::softmax(x),
        }
    }
}

/// Input normalization: per-channel mean subtraction on `[0, 255]` RGB.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preprocess {
    pub mean: [f32; 3],
}

impl Default for Preprocess {
    fn default() -> Self {
        Preprocess {
            mean: [131.1, 103.9, 91.6],
        }
    }
}

impl Preprocess {
    pub fn apply(&self, img: &Tensor) -> Result<Tensor> {
        let (_, _, c) = img.dims3()?;
        if c != 3 {
            return Err(Error::InvalidTensor(format!(
                "expected RGB input, got shape {:?}",
                img.shape()
            )));
        }
        let mut out = img.clone();
        for px in out.data_mut().chunks_exact_mut(3) {
            for (v, m) in px.iter_mut().zip(self.mean) {
                *v -= m;
            }
        }
        Ok(out)
    }
}
