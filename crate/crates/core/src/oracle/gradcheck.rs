//! Central finite differences against backward gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diffcore::{Mode, Tensor};
use crate::error::Result;
use crate::netgraph::{ForwardOptions, ForwardPass, MaskInput, ModelGraph};

/// Relative step for single-op checks.
pub const OP_STEP: f64 = 1e-4;

/// Relative step for whole-network checks. A deep net has enough ReLU and
/// max-pool kinks that a 1e-4 perturbation routinely crosses one.
pub const NETWORK_STEP: f64 = 1e-6;

/// Step `scale·max(1, |x|)`.
pub fn step(x: f64, scale: f64) -> f64 {
    scale * x.abs().max(1.0)
}

/// `(f(x+h) − f(x−h)) / 2h` with `h = 1e-4·max(1, |x|)`.
pub fn central_difference(x: f64, f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    central_difference_scaled(x, OP_STEP, f)
}

pub fn central_difference_scaled(x: f64, scale: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let h = step(x, scale);
    Ok((f(x + h)? - f(x - h)?) / (2.0 * h))
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks every entry of a tensor-valued gradient against finite differences
/// of the scalar function `f`. Returns the worst relative error.
pub fn check_tensor(
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    floor: f64,
    mut f: impl FnMut(&Tensor<f64>) -> Result<f64>,
) -> Result<f64> {
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let x0 = x.data()[i];
        let num = central_difference(x0, |v| {
            probe.data_mut()[i] = v;
            f(&probe)
        })?;
        probe.data_mut()[i] = x0;
        worst = worst.max(rel_error(analytic.data()[i], num, floor));
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamCheck {
    pub layer: usize,
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Loss of `model` on a batch (mean cross-entropy, temperature 1).
pub fn model_loss(model: &ModelGraph<f64>, images: &Tensor<f64>, labels: &[usize], mode: Mode, masks: &MaskInput<f64>) -> Result<f64> {
    let opts = ForwardOptions { mode, masks: masks.clone(), param_grads: false };
    let mut pass = ForwardPass::run(model, images, opts)?;
    let l = pass.loss(labels, 1.0)?;
    Ok(pass.graph.value(l).item())
}

/// Compares backward gradients of `n` randomly chosen parameters with
/// central differences of the loss (step [`NETWORK_STEP`]).
pub fn check_model_params(
    model: &ModelGraph<f64>,
    images: &Tensor<f64>,
    labels: &[usize],
    mode: Mode,
    n: usize,
    seed: u64,
    floor: f64,
) -> Result<Vec<ParamCheck>> {
    let mut pass = ForwardPass::run(model, images, ForwardOptions { mode, masks: MaskInput::None, param_grads: true })?;
    let l = pass.loss(labels, 1.0)?;
    pass.backward(l)?;
    let grads = pass.param_grads();
    // (layer, tensor-in-layer) for every parameter tensor, canonical order
    let owners: Vec<(usize, usize)> =
        model.layers.iter().enumerate().flat_map(|(i, layer)| (0..layer.params().len()).map(move |t| (i, t))).collect();
    let sizes: Vec<usize> = grads.iter().map(Tensor::numel).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<usize> = sample(&mut rng, total, n.min(total)).into_vec();
    picks.sort_unstable();
    let none = MaskInput::None;
    picks
        .into_iter()
        .map(|flat| {
            let (mut k, mut idx) = (0, flat);
            while idx >= sizes[k] {
                idx -= sizes[k];
                k += 1;
            }
            let (layer, tensor) = owners[k];
            let mut probe = model.clone();
            let x0 = model.layers[layer].params()[tensor].data()[idx];
            let numeric = central_difference_scaled(x0, NETWORK_STEP, |v| {
                probe.layers[layer].params_mut()[tensor].data_mut()[idx] = v;
                model_loss(&probe, images, labels, mode, &none)
            })?;
            let analytic = grads[k].data()[idx];
            Ok(ParamCheck { layer, tensor, index: idx, analytic, numeric, rel_error: rel_error(analytic, numeric, floor) })
        })
        .collect()
}

/// Mask gradients at `m̂ = 1` against central differences, worst relative error.
pub fn check_mask_grads(model: &ModelGraph<f64>, images: &Tensor<f64>, labels: &[usize], mode: Mode, floor: f64) -> Result<f64> {
    let ones = MaskInput::<f64>::ones(model);
    let mut pass = ForwardPass::run(model, images, ForwardOptions { mode, masks: ones.clone(), param_grads: false })?;
    let l = pass.loss(labels, 1.0)?;
    pass.backward(l)?;
    let grads = pass.mask_grads();
    let MaskInput::Values(base) = ones else { unreachable!() };
    let mut worst = 0.0f64;
    for (k, g) in grads.iter().enumerate() {
        for (u, &a) in g.iter().enumerate() {
            let num = central_difference_scaled(1.0, NETWORK_STEP, |v| {
                let mut m = base.clone();
                m[k][u] = v;
                model_loss(model, images, labels, mode, &MaskInput::Values(m))
            })?;
            worst = worst.max(rel_error(a, num, floor));
        }
    }
    Ok(worst)
}
