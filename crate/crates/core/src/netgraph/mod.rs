//! Sequential model description with per-unit mask attachment points.
//!
//! A prunable conv/linear layer owns one mask entry per output unit. The mask
//! multiplies the unit's output *after* the batch norm that follows it (if any),
//! so a zero entry removes the unit's whole contribution, bias and BN shift
//! included, and the masked model is exactly the model with that unit cut out.

mod forward;
mod init;
mod io;
mod presets;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Real, Tensor};
use crate::error::{Error, Result};

pub use forward::{ForwardOptions, ForwardPass, MaskInput};
pub use init::he_init;
pub use io::{load_checkpoint, read_params, save_checkpoint, write_params, ArchDoc, ParamManifestEntry};
pub use presets::{build_vgg19, build_vgg_like, tiny_vgg, VggLayout};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Hyperparameters of one layer, without parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
        stride: usize,
        prunable: bool,
    },
    Bn {
        channels: usize,
        eps: f64,
        momentum: f64,
    },
    Relu,
    MaxPool,
    AvgPool {
        out_h: usize,
        out_w: usize,
    },
    Flatten,
    Linear {
        in_features: usize,
        out_features: usize,
        prunable: bool,
    },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Bn { .. } => "bn",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool => "maxpool",
            LayerSpec::AvgPool { .. } => "avgpool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Linear { .. } => "linear",
        }
    }

    /// Mask length when the layer is prunable.
    pub fn mask_len(&self) -> Option<usize> {
        match *self {
            LayerSpec::Conv { out_channels, prunable: true, .. } => Some(out_channels),
            LayerSpec::Linear { out_features, prunable: true, .. } => Some(out_features),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T> {
    /// `[C_out, C_in, K, K]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub padding: usize,
    pub stride: usize,
    pub prunable: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    /// `[U, F]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub prunable: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Conv(Conv<T>),
    BatchNorm(BatchNorm<T>),
    Relu,
    MaxPool,
    AvgPool { out_h: usize, out_w: usize },
    Flatten,
    Linear(Linear<T>),
}

impl<T: Real> Layer<T> {
    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv(c) => LayerSpec::Conv {
                in_channels: c.weight.shape()[1],
                out_channels: c.weight.shape()[0],
                kernel: c.weight.shape()[2],
                padding: c.padding,
                stride: c.stride,
                prunable: c.prunable,
            },
            Layer::BatchNorm(b) => LayerSpec::Bn { channels: b.gamma.numel(), eps: b.eps, momentum: b.momentum },
            Layer::Relu => LayerSpec::Relu,
            Layer::MaxPool => LayerSpec::MaxPool,
            Layer::AvgPool { out_h, out_w } => LayerSpec::AvgPool { out_h: *out_h, out_w: *out_w },
            Layer::Flatten => LayerSpec::Flatten,
            Layer::Linear(l) => LayerSpec::Linear {
                in_features: l.weight.shape()[1],
                out_features: l.weight.shape()[0],
                prunable: l.prunable,
            },
        }
    }

    /// Zero-initialized layer for a spec (gamma = 1, running var = 1).
    pub fn from_spec(spec: &LayerSpec) -> Self {
        match *spec {
            LayerSpec::Conv { in_channels, out_channels, kernel, padding, stride, prunable } => Layer::Conv(Conv {
                weight: Tensor::zeros(&[out_channels, in_channels, kernel, kernel]),
                bias: Tensor::zeros(&[out_channels]),
                padding,
                stride,
                prunable,
            }),
            LayerSpec::Bn { channels, eps, momentum } => Layer::BatchNorm(BatchNorm {
                gamma: Tensor::ones(&[channels]),
                beta: Tensor::zeros(&[channels]),
                running_mean: vec![T::zero(); channels],
                running_var: vec![T::one(); channels],
                eps,
                momentum,
            }),
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::MaxPool => Layer::MaxPool,
            LayerSpec::AvgPool { out_h, out_w } => Layer::AvgPool { out_h, out_w },
            LayerSpec::Flatten => Layer::Flatten,
            LayerSpec::Linear { in_features, out_features, prunable } => Layer::Linear(Linear {
                weight: Tensor::zeros(&[out_features, in_features]),
                bias: Tensor::zeros(&[out_features]),
                prunable,
            }),
        }
    }

    /// Trainable tensors in canonical order.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            Layer::Conv(c) => vec![&c.weight, &c.bias],
            Layer::BatchNorm(b) => vec![&b.gamma, &b.beta],
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Conv(c) => vec![&mut c.weight, &mut c.bias],
            Layer::BatchNorm(b) => vec![&mut b.gamma, &mut b.beta],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            _ => vec![],
        }
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            Layer::Conv(_) | Layer::Linear(_) => &["weight", "bias"],
            Layer::BatchNorm(_) => &["gamma", "beta"],
            _ => &[],
        }
    }

    pub fn is_prunable(&self) -> bool {
        matches!(self, Layer::Conv(Conv { prunable: true, .. }) | Layer::Linear(Linear { prunable: true, .. }))
    }

    /// Output units of a conv or linear layer.
    pub fn out_units(&self) -> Option<usize> {
        match self {
            Layer::Conv(c) => Some(c.weight.shape()[0]),
            Layer::Linear(l) => Some(l.weight.shape()[0]),
            _ => None,
        }
    }
}

/// Sequential network: input shape `[C, H, W]` and an ordered layer list.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph<T> {
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub layers: Vec<Layer<T>>,
}

impl<T: Real> ModelGraph<T> {
    /// Builds a zero-initialized model and validates its shapes.
    pub fn from_specs(input_shape: [usize; 3], specs: &[LayerSpec]) -> Result<Self> {
        let layers = specs.iter().map(Layer::from_spec).collect();
        let mut m = ModelGraph { input_shape, num_classes: 0, layers };
        let shapes = m.activation_shapes()?;
        let last = shapes.last().ok_or_else(|| Error::invalid("model has no layers"))?;
        if last.len() != 1 {
            return Err(Error::shape(format!("model output must be a feature vector, got {last:?}")));
        }
        if let Some(Layer::Linear(Linear { prunable: true, .. })) = m.layers.iter().rev().find(|l| l.out_units().is_some()) {
            return Err(Error::invalid("the output layer cannot be prunable"));
        }
        m.num_classes = last[0];
        Ok(m)
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    /// Per-example output shape of every layer (batch dimension omitted).
    pub fn activation_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut cur = self.input_shape.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, spec) in self.specs().iter().enumerate() {
            let err = |msg: String| Error::shape(format!("layer {i} ({}): {msg}", spec.kind()));
            cur = match *spec {
                LayerSpec::Conv { in_channels, out_channels, kernel, padding, stride, .. } => {
                    let [c, h, w] = cur[..] else { return Err(err(format!("expects CHW input, got {cur:?}"))) };
                    if c != in_channels {
                        return Err(err(format!("expects {in_channels} channels, got {c}")));
                    }
                    let (ph, pw) = (h + 2 * padding, w + 2 * padding);
                    if stride == 0 || kernel > ph || kernel > pw || (ph - kernel) % stride != 0 || (pw - kernel) % stride != 0 {
                        return Err(err(format!("inexact output extent for input {h}x{w}")));
                    }
                    vec![out_channels, (ph - kernel) / stride + 1, (pw - kernel) / stride + 1]
                }
                LayerSpec::Bn { channels, .. } => {
                    if cur.first() != Some(&channels) {
                        return Err(err(format!("expects {channels} channels, got {cur:?}")));
                    }
                    cur
                }
                LayerSpec::Relu => cur,
                LayerSpec::MaxPool => {
                    let [c, h, w] = cur[..] else { return Err(err(format!("expects CHW input, got {cur:?}"))) };
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(err(format!("odd spatial extent {h}x{w}")));
                    }
                    vec![c, h / 2, w / 2]
                }
                LayerSpec::AvgPool { out_h, out_w } => {
                    let [c, h, w] = cur[..] else { return Err(err(format!("expects CHW input, got {cur:?}"))) };
                    if out_h == 0 || out_w == 0 || h % out_h != 0 || w % out_w != 0 {
                        return Err(err(format!("cannot pool {h}x{w} to {out_h}x{out_w}")));
                    }
                    vec![c, out_h, out_w]
                }
                LayerSpec::Flatten => vec![cur.iter().product()],
                LayerSpec::Linear { in_features, out_features, .. } => {
                    if cur != [in_features] {
                        return Err(err(format!("expects {in_features} features, got {cur:?}")));
                    }
                    vec![out_features]
                }
            };
            out.push(cur.clone());
        }
        Ok(out)
    }

    /// Indices of prunable layers, in order.
    pub fn prunable_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].is_prunable()).collect()
    }

    /// Index of the layer whose output the mask of prunable layer `i` multiplies.
    pub fn mask_point(&self, i: usize) -> usize {
        match self.layers.get(i + 1) {
            Some(Layer::BatchNorm(_)) => i + 1,
            _ => i,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().flat_map(|l| l.params()).map(|t| t.numel()).sum()
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    /// Output-unit widths of all conv/linear layers keyed by layer index.
    pub fn widths(&self) -> Vec<(usize, usize)> {
        self.layers.iter().enumerate().filter_map(|(i, l)| l.out_units().map(|u| (i, u))).collect()
    }

    pub fn all_ones_mask(&self) -> MaskSet {
        MaskSet {
            entries: self.prunable_layers().into_iter().map(|i| UnitMask { layer: i, keep: vec![true; self.layers[i].out_units().unwrap()] }).collect(),
        }
    }

    /// Folds train-mode batch statistics into running estimates.
    pub fn apply_bn_stats(&mut self, stats: &[(usize, crate::diffcore::BatchStats<T>)]) {
        for (i, s) in stats {
            if let Layer::BatchNorm(bn) = &mut self.layers[*i] {
                let m = T::lit(bn.momentum);
                let keep = T::one() - m;
                for c in 0..bn.running_mean.len() {
                    bn.running_mean[c] = keep * bn.running_mean[c] + m * s.mean[c];
                    bn.running_var[c] = keep * bn.running_var[c] + m * s.var_unbiased[c];
                }
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ModelGraph<U> {
        let cv = |v: &Vec<T>| v.iter().map(|x| U::lit(x.as_f64())).collect();
        ModelGraph {
            input_shape: self.input_shape,
            num_classes: self.num_classes,
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Conv(c) => Layer::Conv(Conv {
                        weight: c.weight.cast(),
                        bias: c.bias.cast(),
                        padding: c.padding,
                        stride: c.stride,
                        prunable: c.prunable,
                    }),
                    Layer::BatchNorm(b) => Layer::BatchNorm(BatchNorm {
                        gamma: b.gamma.cast(),
                        beta: b.beta.cast(),
                        running_mean: cv(&b.running_mean),
                        running_var: cv(&b.running_var),
                        eps: b.eps,
                        momentum: b.momentum,
                    }),
                    Layer::Relu => Layer::Relu,
                    Layer::MaxPool => Layer::MaxPool,
                    Layer::AvgPool { out_h, out_w } => Layer::AvgPool { out_h: *out_h, out_w: *out_w },
                    Layer::Flatten => Layer::Flatten,
                    Layer::Linear(l) => {
                        Layer::Linear(Linear { weight: l.weight.cast(), bias: l.bias.cast(), prunable: l.prunable })
                    }
                })
                .collect(),
        }
    }
}

/// Binary keep/prune decision for the units of one prunable layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitMask {
    pub layer: usize,
    pub keep: Vec<bool>,
}

impl UnitMask {
    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

/// One [`UnitMask`] per prunable layer, in layer order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSet {
    pub entries: Vec<UnitMask>,
}

impl MaskSet {
    pub fn total_units(&self) -> usize {
        self.entries.iter().map(|e| e.keep.len()).sum()
    }

    pub fn kept_units(&self) -> usize {
        self.entries.iter().map(UnitMask::kept).sum()
    }

    pub fn pruned_units(&self) -> usize {
        self.total_units() - self.kept_units()
    }

    pub fn get(&self, layer: usize) -> Option<&UnitMask> {
        self.entries.iter().find(|e| e.layer == layer)
    }

    /// Checks alignment with the prunable layers of `model`.
    pub fn validate<T: Real>(&self, model: &ModelGraph<T>) -> Result<()> {
        let layers = model.prunable_layers();
        if layers.len() != self.entries.len() {
            return Err(Error::shape(format!(
                "mask set has {} entries, model has {} prunable layers",
                self.entries.len(),
                layers.len()
            )));
        }
        for (e, &i) in self.entries.iter().zip(&layers) {
            let want = model.layers[i].out_units().unwrap();
            if e.layer != i || e.keep.len() != want {
                return Err(Error::shape(format!(
                    "mask for layer {} has {} entries, layer {i} has {want} units",
                    e.layer,
                    e.keep.len()
                )));
            }
        }
        Ok(())
    }

    /// Mask values as reals (1 = keep).
    pub fn values<T: Real>(&self) -> Vec<Vec<T>> {
        self.entries.iter().map(|e| e.keep.iter().map(|&k| if k { T::one() } else { T::zero() }).collect()).collect()
    }
}
