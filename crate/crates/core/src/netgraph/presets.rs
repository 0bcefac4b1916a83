use super::{LayerSpec, ModelGraph, BN_EPS, BN_MOMENTUM};
use crate::diffcore::Real;
use crate::error::{Error, Result};

/// Block structure of a VGG-style network.
#[derive(Clone, Debug, PartialEq)]
pub struct VggLayout {
    /// `(width, conv-bn-relu count)` per block; 2×2 max pooling between blocks.
    pub blocks: Vec<(usize, usize)>,
    /// Hidden linear widths before the classifier.
    pub hidden: Vec<usize>,
    /// Adaptive average pool target after the last block.
    pub avgpool: (usize, usize),
}

impl VggLayout {
    /// VGG-19 widths scaled by `width`, rounding up. The classifier is not scaled.
    pub fn vgg19(width: f64) -> Result<Self> {
        if !(width > 0.0) || !width.is_finite() {
            return Err(Error::invalid(format!("width multiplier must be positive, got {width}")));
        }
        let scale = |w: usize| (w as f64 * width).ceil() as usize;
        let blocks = [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)].iter().map(|&(w, n)| (scale(w), n)).collect();
        Ok(VggLayout { blocks, hidden: vec![scale(1024), scale(512)], avgpool: (2, 2) })
    }
}

/// Builds a zero-initialized VGG-style model. Every conv and hidden linear
/// layer is prunable; the classifier is not.
pub fn build_vgg_like<T: Real>(input_shape: [usize; 3], num_classes: usize, layout: &VggLayout) -> Result<ModelGraph<T>> {
    if num_classes == 0 {
        return Err(Error::invalid("num_classes must be positive"));
    }
    if layout.blocks.iter().any(|&(w, _)| w == 0) || layout.hidden.contains(&0) {
        return Err(Error::invalid(format!("layout has a zero-width layer: {layout:?}")));
    }
    let mut specs = Vec::new();
    let mut ch = input_shape[0];
    for (b, &(width, convs)) in layout.blocks.iter().enumerate() {
        if b > 0 {
            specs.push(LayerSpec::MaxPool);
        }
        for _ in 0..convs {
            specs.push(LayerSpec::Conv { in_channels: ch, out_channels: width, kernel: 3, padding: 1, stride: 1, prunable: true });
            specs.push(LayerSpec::Bn { channels: width, eps: BN_EPS, momentum: BN_MOMENTUM });
            specs.push(LayerSpec::Relu);
            ch = width;
        }
    }
    let (ah, aw) = layout.avgpool;
    specs.push(LayerSpec::AvgPool { out_h: ah, out_w: aw });
    specs.push(LayerSpec::Flatten);
    let mut features = ch * ah * aw;
    for &h in &layout.hidden {
        specs.push(LayerSpec::Linear { in_features: features, out_features: h, prunable: true });
        specs.push(LayerSpec::Relu);
        features = h;
    }
    specs.push(LayerSpec::Linear { in_features: features, out_features: num_classes, prunable: false });
    ModelGraph::from_specs(input_shape, &specs)
}

/// VGG-19 for 3×32×32 inputs.
pub fn build_vgg19<T: Real>(num_classes: usize, width: f64) -> Result<ModelGraph<T>> {
    build_vgg_like([3, 32, 32], num_classes, &VggLayout::vgg19(width)?)
}

/// The desk-scale VGG-19 (`width` is typically 0.25 or smaller).
pub fn tiny_vgg<T: Real>(num_classes: usize, width: f64) -> Result<ModelGraph<T>> {
    build_vgg19(num_classes, width)
}
