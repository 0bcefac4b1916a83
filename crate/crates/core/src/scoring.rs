//! Saliency scores over prunable units (and over single weights for the
//! unstructured baselines).
//!
//! Every [`ScoreSet`] is keep-if-high: the pruner keeps the units with the
//! largest `values`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compute::CostTable;
use crate::diffcore::{Counters, Mode, Real, Tensor};
use crate::error::{Error, Result};
use crate::netgraph::{ForwardOptions, ForwardPass, Layer, MaskInput, MaskSet, ModelGraph, UnitMask};

pub const DEFAULT_GRASP_TEMPERATURE: f64 = 200.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Criterion {
    #[serde(rename = "3sp")]
    ThreeSp,
    #[serde(rename = "3sp-ca")]
    ThreeSpCa,
    #[serde(rename = "snip")]
    Snip,
    #[serde(rename = "grasp")]
    Grasp,
    #[serde(rename = "grasp-structured")]
    GraspStructured,
    #[serde(rename = "uniform")]
    Uniform,
}

impl Criterion {
    pub const ALL: [Criterion; 6] = [
        Criterion::ThreeSp,
        Criterion::ThreeSpCa,
        Criterion::Snip,
        Criterion::Grasp,
        Criterion::GraspStructured,
        Criterion::Uniform,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::ThreeSp => "3sp",
            Criterion::ThreeSpCa => "3sp-ca",
            Criterion::Snip => "snip",
            Criterion::Grasp => "grasp",
            Criterion::GraspStructured => "grasp-structured",
            Criterion::Uniform => "uniform",
        }
    }
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown criterion {s:?}")))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreMeta {
    pub batch_size: usize,
    pub batch_seed: Option<u64>,
    pub temperature: Option<f64>,
    pub lambda: Option<f64>,
    /// Loss of the scoring minibatch at the unperturbed parameters.
    pub loss: f64,
    /// Passes recorded while scoring.
    pub forward_passes: u32,
    pub backward_passes: u32,
    pub max_batch: usize,
}

impl ScoreMeta {
    fn add_counters(&mut self, c: Counters) {
        self.forward_passes += c.forward_passes;
        self.backward_passes += c.backward_passes;
        self.max_batch = self.max_batch.max(c.max_batch);
    }
}

/// Per prunable layer, one score per unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub criterion: Criterion,
    /// Layer index of each entry.
    pub layers: Vec<usize>,
    /// Ranking values (keep-if-high).
    pub values: Vec<Vec<f64>>,
    /// Underlying signed quantity before any absolute value or cost division.
    pub signed: Vec<Vec<f64>>,
    pub meta: ScoreMeta,
}

impl ScoreSet {
    pub fn len(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values pooled in (layer, unit) order.
    pub fn flat(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }

    pub fn validate<T: Real>(&self, model: &ModelGraph<T>) -> Result<()> {
        let layers = model.prunable_layers();
        if layers != self.layers || self.values.len() != layers.len() {
            return Err(Error::shape(format!("score layers {:?} do not match prunable layers {layers:?}", self.layers)));
        }
        for (v, &i) in self.values.iter().zip(&layers) {
            if v.len() != model.layers[i].out_units().unwrap() {
                return Err(Error::shape(format!("layer {i}: {} scores for {} units", v.len(), model.layers[i].out_units().unwrap())));
            }
        }
        Ok(())
    }

    /// SNIP-style normalization: divide every value by the pooled sum.
    pub fn normalized(&self) -> Result<ScoreSet> {
        let total: f64 = self.values.iter().flatten().sum();
        if !(total.is_finite() && total != 0.0) {
            return Err(Error::invalid(format!("cannot normalize scores summing to {total}")));
        }
        let mut out = self.clone();
        out.values.iter_mut().flatten().for_each(|v| *v /= total);
        Ok(out)
    }
}

fn finite_or_err(vals: &[Vec<f64>], what: &str) -> Result<()> {
    if vals.iter().flatten().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} gradients")))
    }
}

fn to_f64<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

/// Mask gradients at `m̂ = 1` from one forward and one backward pass.
pub struct MaskGradients {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
    pub layers: Vec<usize>,
    pub counters: Counters,
}

pub fn mask_gradients<T: Real>(
    model: &ModelGraph<T>,
    images: &Tensor<T>,
    labels: &[usize],
    mode: Mode,
    temperature: f64,
) -> Result<MaskGradients> {
    let opts = ForwardOptions { mode, masks: MaskInput::ones(model), param_grads: false };
    let mut pass = ForwardPass::run(model, images, opts)?;
    let loss = pass.loss(labels, T::lit(temperature))?;
    pass.backward(loss)?;
    let grads: Vec<Vec<f64>> = pass.mask_grads().iter().map(|g| to_f64(g)).collect();
    finite_or_err(&grads, "mask")?;
    Ok(MaskGradients {
        loss: pass.graph.value(loss).item().as_f64(),
        grads,
        layers: pass.mask_nodes.iter().map(|&(i, _)| i).collect(),
        counters: pass.graph.counters(),
    })
}

/// Structured first-order score `|∂L/∂m̂|` in train mode on one minibatch.
pub fn score_3sp<T: Real>(model: &ModelGraph<T>, images: &Tensor<T>, labels: &[usize]) -> Result<ScoreSet> {
    score_3sp_mode(model, images, labels, Mode::Train)
}

pub fn score_3sp_mode<T: Real>(model: &ModelGraph<T>, images: &Tensor<T>, labels: &[usize], mode: Mode) -> Result<ScoreSet> {
    let mg = mask_gradients(model, images, labels, mode, 1.0)?;
    let mut meta = ScoreMeta { batch_size: labels.len(), loss: mg.loss, ..Default::default() };
    meta.add_counters(mg.counters);
    Ok(ScoreSet {
        criterion: Criterion::ThreeSp,
        layers: mg.layers,
        values: mg.grads.iter().map(|g| g.iter().map(|v| v.abs()).collect()).collect(),
        signed: mg.grads,
        meta,
    })
}

/// Compute-aware retention scores `R = |g| / c̃`.
pub fn retention_scores(scores: &ScoreSet, costs: &CostTable) -> Result<ScoreSet> {
    let cost_layers: Vec<usize> = costs.layers.iter().map(|l| l.layer).collect();
    if cost_layers != scores.layers {
        return Err(Error::shape(format!("cost layers {cost_layers:?} do not match score layers {:?}", scores.layers)));
    }
    let mut out = scores.clone();
    for (vals, lc) in out.values.iter_mut().zip(&costs.layers) {
        if !(lc.normalized > 0.0) {
            return Err(Error::invalid(format!("layer {}: normalized cost {} is not positive", lc.layer, lc.normalized)));
        }
        vals.iter_mut().for_each(|v| *v = v.abs() / lc.normalized);
    }
    out.criterion = Criterion::ThreeSpCa;
    out.meta.lambda = Some(costs.lambda);
    Ok(out)
}

/// Per-weight scores for every conv and linear weight tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightScores {
    pub layers: Vec<usize>,
    pub shapes: Vec<Vec<usize>>,
    /// Signed per-weight quantity; the ranking value is criterion dependent.
    pub signed: Vec<Vec<f64>>,
    pub meta: ScoreMeta,
}

impl WeightScores {
    /// Signed sum over the incoming weights of one output unit.
    pub fn unit_sum(&self, entry: usize, unit: usize) -> f64 {
        let per_unit: usize = self.shapes[entry][1..].iter().product();
        self.signed[entry][unit * per_unit..(unit + 1) * per_unit].iter().sum()
    }
}

/// Conv and linear layers, the layers whose weights carry unstructured scores.
pub fn weight_layers<T: Real>(model: &ModelGraph<T>) -> Vec<usize> {
    (0..model.layers.len())
        .filter(|&i| matches!(model.layers[i], Layer::Conv(_) | Layer::Linear(_)))
        .collect()
}

fn weight_of<T: Real>(layer: &Layer<T>) -> &Tensor<T> {
    match layer {
        Layer::Conv(c) => &c.weight,
        Layer::Linear(l) => &l.weight,
        _ => unreachable!("weight_layers filters to conv/linear"),
    }
}

fn weight_of_mut<T: Real>(layer: &mut Layer<T>) -> &mut Tensor<T> {
    match layer {
        Layer::Conv(c) => &mut c.weight,
        Layer::Linear(l) => &mut l.weight,
        _ => unreachable!("weight_layers filters to conv/linear"),
    }
}

/// Loss and weight gradients (conv/linear weights only), optionally with masks.
pub struct WeightGradients {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
    pub mask_grads: Vec<Vec<f64>>,
    pub counters: Counters,
}

pub fn weight_gradients<T: Real>(
    model: &ModelGraph<T>,
    images: &Tensor<T>,
    labels: &[usize],
    mode: Mode,
    temperature: f64,
    masks: MaskInput<T>,
) -> Result<WeightGradients> {
    let opts = ForwardOptions { mode, masks, param_grads: true };
    let mut pass = ForwardPass::run(model, images, opts)?;
    let loss = pass.loss(labels, T::lit(temperature))?;
    pass.backward(loss)?;
    let grads: Vec<Vec<f64>> = weight_layers(model)
        .into_iter()
        .map(|i| to_f64(pass.graph.grad_or_zero(pass.param_nodes[i][0]).data()))
        .collect();
    finite_or_err(&grads, "weight")?;
    let mask_grads: Vec<Vec<f64>> = pass.mask_grads().iter().map(|g| to_f64(g)).collect();
    finite_or_err(&mask_grads, "mask")?;
    Ok(WeightGradients { loss: pass.graph.value(loss).item().as_f64(), grads, mask_grads, counters: pass.graph.counters() })
}

/// Unstructured SNIP: signed `w·∂L/∂w` per weight (rank by absolute value).
pub fn score_snip_unstructured<T: Real>(model: &ModelGraph<T>, images: &Tensor<T>, labels: &[usize]) -> Result<WeightScores> {
    score_snip_unstructured_mode(model, images, labels, Mode::Train)
}

pub fn score_snip_unstructured_mode<T: Real>(
    model: &ModelGraph<T>,
    images: &Tensor<T>,
    labels: &[usize],
    mode: Mode,
) -> Result<WeightScores> {
    let wg = weight_gradients(model, images, labels, mode, 1.0, MaskInput::None)?;
    let layers = weight_layers(model);
    let signed = layers
        .iter()
        .zip(&wg.grads)
        .map(|(&i, g)| weight_of(&model.layers[i]).data().iter().zip(g).map(|(w, g)| w.as_f64() * g).collect())
        .collect();
    let mut meta = ScoreMeta { batch_size: labels.len(), loss: wg.loss, ..Default::default() };
    meta.add_counters(wg.counters);
    Ok(WeightScores { shapes: layers.iter().map(|&i| weight_of(&model.layers[i]).shape().to_vec()).collect(), layers, signed, meta })
}

/// Central-difference Hessian-vector product from a gradient oracle:
/// `(∇L(θ+εv) − ∇L(θ−εv)) / 2ε` with `ε = 1e-3·‖θ‖/‖v‖`.
pub fn fd_hvp(theta: &[f64], v: &[f64], mut grad: impl FnMut(&[f64]) -> Result<Vec<f64>>) -> Result<Vec<f64>> {
    let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if vn == 0.0 {
        return Ok(vec![0.0; theta.len()]);
    }
    let tn = theta.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
    let eps = 1e-3 * tn / vn;
    let shifted = |s: f64| -> Vec<f64> { theta.iter().zip(v).map(|(t, d)| t + s * eps * d).collect() };
    let gp = grad(&shifted(1.0))?;
    let gm = grad(&shifted(-1.0))?;
    let hv: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
    if hv.iter().all(|x| x.is_finite()) {
        Ok(hv)
    } else {
        Err(Error::NonFinite("Hessian-vector product".into()))
    }
}

fn flat_weights<T: Real>(model: &ModelGraph<T>) -> Vec<f64> {
    weight_layers(model).into_iter().flat_map(|i| to_f64(weight_of(&model.layers[i]).data())).collect()
}

fn with_weights<T: Real>(model: &ModelGraph<T>, flat: &[f64]) -> ModelGraph<T> {
    let mut m = model.clone();
    let mut off = 0;
    for i in weight_layers(model) {
        let w = weight_of_mut(&mut m.layers[i]);
        let n = w.numel();
        w.data_mut().iter_mut().zip(&flat[off..off + n]).for_each(|(d, &s)| *d = T::lit(s));
        off += n;
    }
    m
}

fn split_like(flat: &[f64], lens: &[usize]) -> Vec<Vec<f64>> {
    let mut off = 0;
    lens.iter()
        .map(|&n| {
            let v = flat[off..off + n].to_vec();
            off += n;
            v
        })
        .collect()
}

/// Unstructured GraSP: signed `θ ⊙ Hg` per weight. Keeping the largest values
/// keeps the weights whose removal least reduces gradient flow.
pub fn score_grasp_unstructured<T: Real>(
    model: &ModelGraph<T>,
    images: &Tensor<T>,
    labels: &[usize],
    temperature: f64,
) -> Result<WeightScores> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    let mode = Mode::Train;
    let base = weight_gradients(model, images, labels, mode, temperature, MaskInput::None)?;
    let mut meta = ScoreMeta { batch_size: labels.len(), temperature: Some(temperature), loss: base.loss, ..Default::default() };
    meta.add_counters(base.counters);
    let theta = flat_weights(model);
    let g: Vec<f64> = base.grads.iter().flatten().copied().collect();
    let hg = fd_hvp(&theta, &g, |t| {
        let wg = weight_gradients(&with_weights(model, t), images, labels, mode, temperature, MaskInput::None)?;
        meta.add_counters(wg.counters);
        Ok(wg.grads.into_iter().flatten().collect())
    })?;
    let signed: Vec<f64> = theta.iter().zip(&hg).map(|(t, h)| t * h).collect();
    let layers = weight_layers(model);
    let lens: Vec<usize> = base.grads.iter().map(Vec::len).collect();
    Ok(WeightScores {
        shapes: layers.iter().map(|&i| weight_of(&model.layers[i]).shape().to_vec()).collect(),
        layers,
        signed: split_like(&signed, &lens),
        meta,
    })
}

/// Structured GraSP: `Σ_w g_w ∂²L/∂w∂m̂`, the directional derivative of the
/// mask gradient along the weight gradient (half of `∂‖∇_w L‖²/∂m̂`).
/// Predicted change of `‖∇_w L‖²` on removing a unit is `−2·score`.
pub fn score_grasp_structured<T: Real>(
    model: &ModelGraph<T>,
    images: &Tensor<T>,
    labels: &[usize],
    temperature: f64,
) -> Result<ScoreSet> {
    score_grasp_structured_mode(model, images, labels, temperature, Mode::Train)
}

pub fn score_grasp_structured_mode<T: Real>(
    model: &ModelGraph<T>,
    images: &Tensor<T>,
    labels: &[usize],
    temperature: f64,
    mode: Mode,
) -> Result<ScoreSet> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    let base = weight_gradients(model, images, labels, mode, temperature, MaskInput::ones(model))?;
    let mut meta = ScoreMeta { batch_size: labels.len(), temperature: Some(temperature), loss: base.loss, ..Default::default() };
    meta.add_counters(base.counters);
    let theta = flat_weights(model);
    let g: Vec<f64> = base.grads.iter().flatten().copied().collect();
    let lens: Vec<usize> = base.mask_grads.iter().map(Vec::len).collect();
    // the "gradient" differentiated here is the mask gradient as a function of the weights
    let d = fd_hvp(&theta, &g, |t| {
        let wg = weight_gradients(&with_weights(model, t), images, labels, mode, temperature, MaskInput::ones(model))?;
        meta.add_counters(wg.counters);
        Ok(wg.mask_grads.into_iter().flatten().collect())
    })?;
    let signed = split_like(&d, &lens);
    Ok(ScoreSet { criterion: Criterion::GraspStructured, layers: model.prunable_layers(), values: signed.clone(), signed, meta })
}

/// Bernoulli baseline: every unit pruned independently with probability `p`.
pub fn uniform_mask<T: Real>(model: &ModelGraph<T>, p: f64, seed: u64) -> Result<MaskSet> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("prune probability {p} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(MaskSet {
        entries: model
            .prunable_layers()
            .into_iter()
            .map(|i| UnitMask {
                layer: i,
                keep: (0..model.layers[i].out_units().unwrap()).map(|_| !rng.random_bool(p)).collect(),
            })
            .collect(),
    })
}

/// Writes `layer_index,unit_index,raw_score,cost,retention_score,kept`.
/// `raw` holds the signed scores; cost and retention use `costs`.
pub fn write_score_dump(path: &Path, raw: &ScoreSet, costs: &CostTable, masks: &MaskSet) -> Result<()> {
    let mut out = String::from("layer_index,unit_index,raw_score,cost,retention_score,kept\n");
    for (k, &layer) in raw.layers.iter().enumerate() {
        let lc = costs.layers.iter().find(|c| c.layer == layer).ok_or_else(|| Error::shape(format!("no cost for layer {layer}")))?;
        let keep = masks.get(layer).ok_or_else(|| Error::shape(format!("no mask for layer {layer}")))?;
        for (u, &s) in raw.signed[k].iter().enumerate() {
            out.push_str(&format!("{layer},{u},{s},{},{},{}\n", lc.unit_cost, s.abs() / lc.normalized, keep.keep[u] as u8));
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
