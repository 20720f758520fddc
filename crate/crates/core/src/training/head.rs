//! The classifier head as three dense layers in f64, laid out exactly like
//! the equivalent convolution weights (`[inputs, outputs]`, row-major), so
//! conversion to and from a [`WeightStore`] is a reshape.

use crate::error::{Error, Result};
use crate::model::{head_spec, init_weights, HeadShape, NetworkSpec, WeightStore, HEAD_DROPOUT, HEAD_LAYERS};
use crate::tensor::{softmax_f64, Tensor};

use super::{adam_step, cross_entropy, AdamState, OneHot};

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub name: String,
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros_like(&self) -> Dense {
        Dense {
            name: self.name.clone(),
            inputs: self.inputs,
            outputs: self.outputs,
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }

    /// `b + W^T x`. Zero inputs are skipped, which is exact and makes sparse
    /// post-ReLU features cheap.
    fn forward<T: Copy + Into<f64>>(&self, x: &[T]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (row, &xi) in self.weight.chunks_exact(self.outputs).zip(x) {
            let xi: f64 = xi.into();
            if xi == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
        out
    }

    /// `W delta`, the gradient with respect to this layer's input.
    fn backward_input(&self, delta: &[f64]) -> Vec<f64> {
        self.weight
            .chunks_exact(self.outputs)
            .map(|row| row.iter().zip(delta).map(|(w, d)| w * d).sum())
            .collect()
    }

    /// `grad += scale * (x outer delta)`, bias likewise.
    fn accumulate<T: Copy + Into<f64>>(grad: &mut Dense, x: &[T], delta: &[f64], scale: f64) {
        for (row, &xi) in grad.weight.chunks_exact_mut(grad.outputs).zip(x) {
            let xi: f64 = xi.into();
            if xi == 0.0 {
                continue;
            }
            let s = scale * xi;
            for (g, d) in row.iter_mut().zip(delta) {
                *g += s * d;
            }
        }
        for (g, d) in grad.bias.iter_mut().zip(delta) {
            *g += scale * d;
        }
    }
}

/// Trainable head parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub shape: HeadShape,
    pub layers: [Dense; 3],
    /// Drop probability applied after the first hidden layer during training.
    pub dropout: f64,
}

/// Per-parameter gradients, shaped like [`Head::layers`].
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGradients {
    pub layers: [Dense; 3],
}

impl HeadGradients {
    pub fn zero(&mut self) {
        for l in &mut self.layers {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
    }

    /// Gradient for a store key such as `"fc6.weight"`.
    pub fn get(&self, key: &str) -> Option<&[f64]> {
        let (layer, part) = key.rsplit_once('.')?;
        let l = self.layers.iter().find(|l| l.name == layer)?;
        match part {
            "weight" => Some(&l.weight),
            "bias" => Some(&l.bias),
            _ => None,
        }
    }

    fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }
}

struct Activations {
    h1_pre: Vec<f64>,
    d1: Vec<f64>,
    h2_pre: Vec<f64>,
    h2: Vec<f64>,
    probs: Vec<f64>,
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x.max(0.0)).collect()
}

impl Head {
    /// Glorot-initialised head with zero biases.
    pub fn init(shape: HeadShape, seed: u64) -> Result<Head> {
        let spec = head_spec(shape);
        Head::new(shape, &init_weights(&spec, seed))
    }

    /// Builds a head of the given shape from stored parameters.
    pub fn new(shape: HeadShape, store: &WeightStore) -> Result<Head> {
        let spec = head_spec(shape);
        spec.check_weights(store)?;
        let dense = |i: usize| -> Result<Dense> {
            let name = HEAD_LAYERS[i];
            let p = spec.layer(name).and_then(|l| l.conv_params()).expect("head layer");
            let w = store.require(&format!("{name}.weight"))?;
            let b = store.require(&format!("{name}.bias"))?;
            Ok(Dense {
                name: name.to_string(),
                inputs: p.support * p.support * p.filt_dim,
                outputs: p.num_filts,
                weight: w.data().iter().map(|&v| v as f64).collect(),
                bias: b.data().iter().map(|&v| v as f64).collect(),
            })
        };
        Ok(Head {
            shape,
            layers: [dense(0)?, dense(1)?, dense(2)?],
            dropout: shape.dropout,
        })
    }

    /// Builds a head, reading its dimensions off the stored tensors.
    pub fn from_store(store: &WeightStore) -> Result<Head> {
        let dims = |name: &str| -> Result<[usize; 4]> {
            let t = store.require(&format!("{name}.weight"))?;
            <[usize; 4]>::try_from(t.shape()).map_err(|_| Error::DimensionMismatch {
                layer: name.to_string(),
                expected: vec![0; 4],
                found: t.shape().to_vec(),
            })
        };
        let [k, _, c, h1] = dims("fc6")?;
        let [_, _, _, h2] = dims("fc8")?;
        let [_, _, _, classes] = dims("fc_age")?;
        let shape = HeadShape {
            input_side: k,
            input_channels: c,
            hidden: [h1, h2],
            classes,
            dropout: HEAD_DROPOUT,
        };
        Head::new(shape, store)
    }

    pub fn spec(&self) -> NetworkSpec {
        head_spec(HeadShape { dropout: self.dropout, ..self.shape })
    }

    /// Parameters rounded to f32 under the conv-layer keys.
    pub fn to_store(&self) -> WeightStore {
        let spec = self.spec();
        let mut store = WeightStore::new();
        for l in &self.layers {
            let p = spec.layer(&l.name).and_then(|s| s.conv_params()).expect("head layer");
            let w = l.weight.iter().map(|&v| v as f32).collect();
            let b = l.bias.iter().map(|&v| v as f32).collect();
            store.insert(format!("{}.weight", l.name), Tensor::new(p.weight_shape().to_vec(), w).expect("shape"));
            store.insert(format!("{}.bias", l.name), Tensor::new(vec![l.outputs], b).expect("shape"));
        }
        store
    }

    pub fn classes(&self) -> usize {
        self.shape.classes
    }

    pub fn input_len(&self) -> usize {
        self.shape.input_len()
    }

    pub fn hidden_sizes(&self) -> [usize; 2] {
        self.shape.hidden
    }

    pub fn parameter_sizes(&self) -> Vec<usize> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.len(), l.bias.len()])
            .collect()
    }

    pub fn zero_gradients(&self) -> HeadGradients {
        HeadGradients {
            layers: [
                self.layers[0].zeros_like(),
                self.layers[1].zeros_like(),
                self.layers[2].zeros_like(),
            ],
        }
    }

    fn check_input(&self, features: &[f32], mask: Option<&[f64]>) -> Result<()> {
        if features.len() != self.input_len() {
            return Err(Error::ShapeMismatch {
                op: "head input",
                left: vec![features.len()],
                right: vec![self.input_len()],
            });
        }
        if let Some(m) = mask {
            if m.len() != self.shape.hidden[0] {
                return Err(Error::ShapeMismatch {
                    op: "dropout mask",
                    left: vec![m.len()],
                    right: vec![self.shape.hidden[0]],
                });
            }
        }
        Ok(())
    }

    fn activations(&self, features: &[f32], mask: Option<&[f64]>) -> Result<Activations> {
        self.check_input(features, mask)?;
        let h1_pre = self.layers[0].forward(features);
        let mut d1 = relu(&h1_pre);
        if let Some(m) = mask {
            d1.iter_mut().zip(m).for_each(|(v, m)| *v *= m);
        }
        let h2_pre = self.layers[1].forward(&d1);
        let h2 = relu(&h2_pre);
        let logits = self.layers[2].forward(&h2);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("head logits"));
        }
        Ok(Activations {
            h1_pre,
            d1,
            h2_pre,
            h2,
            probs: softmax_f64(&logits),
        })
    }

    /// Class probabilities without dropout.
    pub fn probabilities(&self, features: &[f32]) -> Result<Vec<f64>> {
        Ok(self.activations(features, None)?.probs)
    }

    /// Cross-entropy loss of one sample, optionally under a dropout mask.
    pub fn loss(&self, features: &[f32], target: OneHot, mask: Option<&[f64]>) -> Result<f64> {
        Ok(cross_entropy(&self.activations(features, mask)?.probs, target))
    }

    /// Arg-max class; ties go to the lowest index.
    pub fn predict_class(&self, features: &[f32]) -> Result<usize> {
        Ok(argmax(&self.probabilities(features)?))
    }

    /// Adds `scale` times this sample's loss gradient to `grads` and returns
    /// the unscaled loss.
    pub fn accumulate_gradients(
        &self,
        features: &[f32],
        target: OneHot,
        mask: Option<&[f64]>,
        grads: &mut HeadGradients,
        scale: f64,
    ) -> Result<f64> {
        if target.classes != self.classes() {
            return Err(Error::InvalidArgument(format!(
                "target has {} classes, head has {}",
                target.classes,
                self.classes()
            )));
        }
        let a = self.activations(features, mask)?;
        let loss = cross_entropy(&a.probs, target);

        let mut dz = a.probs;
        dz[target.class] -= 1.0;
        Dense::accumulate(&mut grads.layers[2], &a.h2, &dz, scale);

        let mut dh2 = self.layers[2].backward_input(&dz);
        dh2.iter_mut().zip(&a.h2_pre).for_each(|(g, &p)| {
            if p <= 0.0 {
                *g = 0.0
            }
        });
        Dense::accumulate(&mut grads.layers[1], &a.d1, &dh2, scale);

        let mut dh1 = self.layers[1].backward_input(&dh2);
        for (j, g) in dh1.iter_mut().enumerate() {
            let m = mask.map_or(1.0, |m| m[j]);
            *g = if a.h1_pre[j] > 0.0 { *g * m } else { 0.0 };
        }
        Dense::accumulate(&mut grads.layers[0], features, &dh1, scale);
        Ok(loss)
    }

    pub fn apply_adam(&mut self, grads: &HeadGradients, state: &mut AdamState) -> Result<()> {
        let mut params: Vec<&mut [f64]> = self
            .layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect();
        adam_step(&mut params, &grads.slices(), state)
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
