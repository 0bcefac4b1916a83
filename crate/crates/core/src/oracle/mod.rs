//! Ablation ground truth for the first-order scores, rank statistics and
//! brute-force equivalence helpers.
//!
//! Ablations run with eval-mode batch norm after [`calibrate_bn`] has set the
//! running statistics to the statistics of the batch itself, so the ablated
//! forward differs from the scored one only in the removed unit.

pub mod gradcheck;

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Mode, Real, Tensor};
use crate::error::{Error, Result};
use crate::netgraph::{ForwardOptions, ForwardPass, Layer, MaskInput, MaskSet, ModelGraph};
use crate::par;
use crate::scoring::{score_3sp_mode, score_grasp_structured_mode, score_snip_unstructured_mode, weight_gradients, weight_layers};

/// Sets every BN layer's running mean and (biased) variance to the statistics
/// a train-mode pass sees on `images`, so eval mode reproduces train mode.
pub fn calibrate_bn<T: Real>(model: &ModelGraph<T>, images: &Tensor<T>) -> Result<ModelGraph<T>> {
    let pass = ForwardPass::run(model, images, ForwardOptions { mode: Mode::Train, masks: MaskInput::None, param_grads: false })?;
    let shapes = model.activation_shapes()?;
    let mut out = model.clone();
    for (i, stats) in &pass.bn_stats {
        let count = (images.shape()[0] * shapes[*i][1..].iter().product::<usize>()) as f64;
        let shrink = T::lit((count - 1.0) / count);
        if let Layer::BatchNorm(b) = &mut out.layers[*i] {
            b.running_mean = stats.mean.clone();
            b.running_var = stats.var_unbiased.iter().map(|&v| v * shrink).collect();
        }
    }
    Ok(out)
}

/// What an ablation removes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Target {
    /// Output unit `unit` of prunable layer `layer`.
    Unit { layer: usize, unit: usize },
    /// Flat index `index` into the weight tensor of conv/linear layer `layer`.
    Weight { layer: usize, index: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRecord {
    pub layer_index: usize,
    pub unit_index: usize,
    /// First-order prediction of the change (signed).
    pub predicted: f64,
    /// Measured change (signed).
    pub actual: f64,
    pub batch_id: u64,
}

fn mask_without<T: Real>(model: &ModelGraph<T>, layer: usize, unit: usize) -> Result<MaskSet> {
    let mut m = model.all_ones_mask();
    let e = m.entries.iter_mut().find(|e| e.layer == layer).ok_or_else(|| Error::invalid(format!("layer {layer} is not prunable")))?;
    *e.keep.get_mut(unit).ok_or_else(|| Error::invalid(format!("layer {layer} has no unit {unit}")))? = false;
    Ok(m)
}

fn eval_loss<T: Real>(model: &ModelGraph<T>, images: &Tensor<T>, labels: &[usize], masks: MaskInput<T>) -> Result<f64> {
    let mut pass = ForwardPass::run(model, images, ForwardOptions { mode: Mode::Eval, masks, param_grads: false })?;
    let l = pass.loss(labels, T::one())?;
    Ok(pass.graph.value(l).item().as_f64())
}

fn zero_weight<T: Real>(model: &ModelGraph<T>, layer: usize, index: usize) -> Result<ModelGraph<T>> {
    let mut m = model.clone();
    let w = match &mut m.layers[layer] {
        Layer::Conv(c) => &mut c.weight,
        Layer::Linear(l) => &mut l.weight,
        _ => return Err(Error::invalid(format!("layer {layer} has no weight"))),
    };
    *w.data_mut().get_mut(index).ok_or_else(|| Error::invalid(format!("weight index {index} out of range")))? = T::zero();
    Ok(m)
}

/// `L(target removed) − L(all kept)`, eval-mode batch norm.
pub fn actual_delta_loss<T: Real>(model: &ModelGraph<T>, images: &Tensor<T>, labels: &[usize], target: Target) -> Result<f64> {
    let base = eval_loss(model, images, labels, MaskInput::None)?;
    let ablated = match target {
        Target::Unit { layer, unit } => eval_loss(model, images, labels, MaskInput::Values(mask_without(model, layer, unit)?.values()))?,
        Target::Weight { layer, index } => eval_loss(&zero_weight(model, layer, index)?, images, labels, MaskInput::None)?,
    };
    Ok(ablated - base)
}

fn grad_sq_norm<T: Real>(model: &ModelGraph<T>, images: &Tensor<T>, labels: &[usize], masks: MaskInput<T>, temperature: f64) -> Result<f64> {
    let wg = weight_gradients(model, images, labels, Mode::Eval, temperature, masks)?;
    Ok(wg.grads.iter().flatten().map(|g| g * g).sum())
}

/// `‖∇_w L‖²(target removed) − ‖∇_w L‖²(all kept)` over conv/linear weights,
/// eval-mode batch norm.
pub fn actual_delta_gradnorm<T: Real>(
    model: &ModelGraph<T>,
    images: &Tensor<T>,
    labels: &[usize],
    target: Target,
    temperature: f64,
) -> Result<f64> {
    let base = grad_sq_norm(model, images, labels, MaskInput::None, temperature)?;
    let ablated = match target {
        Target::Unit { layer, unit } => {
            grad_sq_norm(model, images, labels, MaskInput::Values(mask_without(model, layer, unit)?.values()), temperature)?
        }
        Target::Weight { layer, index } => grad_sq_norm(&zero_weight(model, layer, index)?, images, labels, MaskInput::None, temperature)?,
    };
    Ok(ablated - base)
}

fn zero_channel<T: Real>(t: &mut Tensor<T>, unit: usize) {
    let s = t.shape().to_vec();
    let inner: usize = s[2..].iter().product();
    let c = s[1];
    for n in 0..s[0] {
        let off = (n * c + unit) * inner;
        t.data_mut()[off..off + inner].fill(T::zero());
    }
}

fn suffix_loss<T: Real>(model: &ModelGraph<T>, start: usize, input: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let mut pass = ForwardPass::run_from(model, start, input, ForwardOptions::eval())?;
    let l = pass.loss(labels, T::one())?;
    Ok(pass.graph.value(l).item().as_f64())
}

/// Exact single-unit loss ablations for every prunable unit, reusing the
/// cached activation at each mask point. `predicted = −∂L/∂m̂`.
pub fn structured_loss_ablations<T: Real>(model: &ModelGraph<T>, images: &Tensor<T>, labels: &[usize], batch_id: u64) -> Result<Vec<AblationRecord>> {
    let scores = score_3sp_mode(model, images, labels, Mode::Eval)?;
    let pass = ForwardPass::run(model, images, ForwardOptions::eval())?;
    let base = {
        let mut p = pass;
        let l = p.loss(labels, T::one())?;
        let v = p.graph.value(l).item().as_f64();
        (v, p)
    };
    let (base_loss, pass) = base;
    let targets: Vec<(usize, usize, usize)> = scores
        .layers
        .iter()
        .enumerate()
        .flat_map(|(k, &layer)| (0..scores.signed[k].len()).map(move |u| (k, layer, u)))
        .collect();
    let results = par::map_indexed(targets.len(), |t| -> Result<AblationRecord> {
        let (k, layer, unit) = targets[t];
        let at = model.mask_point(layer);
        let mut act = pass.graph.value(pass.layer_outputs[at]).clone();
        zero_channel(&mut act, unit);
        let actual = suffix_loss(model, at + 1, &act, labels)? - base_loss;
        Ok(AblationRecord { layer_index: layer, unit_index: unit, predicted: -scores.signed[k][unit], actual, batch_id })
    });
    results.into_iter().collect()
}

/// Weight indices visited by the unstructured study: every `stride`-th
/// conv/linear weight in (layer, index) order, starting at `stride / 2`.
pub fn strided_weights<T: Real>(model: &ModelGraph<T>, stride: usize) -> Vec<(usize, usize)> {
    let stride = stride.max(1);
    let mut out = Vec::new();
    let mut next = stride / 2;
    let mut base = 0;
    for i in weight_layers(model) {
        let n = model.layers[i].params()[0].numel();
        while next < base + n {
            out.push((i, next - base));
            next += stride;
        }
        base += n;
    }
    out
}

/// Exact single-weight loss ablations on a strided subsample of weights.
/// `predicted = −w·∂L/∂w`.
pub fn unstructured_loss_ablations<T: Real>(
    model: &ModelGraph<T>,
    images: &Tensor<T>,
    labels: &[usize],
    stride: usize,
    batch_id: u64,
) -> Result<Vec<AblationRecord>> {
    let snip = score_snip_unstructured_mode(model, images, labels, Mode::Eval)?;
    let mut pass = ForwardPass::run(model, images, ForwardOptions::eval())?;
    let l = pass.loss(labels, T::one())?;
    let base_loss = pass.graph.value(l).item().as_f64();
    let targets = strided_weights(model, stride);
    let results = par::map_indexed(targets.len(), |t| -> Result<AblationRecord> {
        let (layer, index) = targets[t];
        let entry = snip.layers.iter().position(|&l| l == layer).expect("weight layer");
        let input = if layer == 0 { images.clone() } else { pass.graph.value(pass.layer_outputs[layer - 1]).clone() };
        let actual = suffix_loss(&zero_weight(model, layer, index)?, layer, &input, labels)? - base_loss;
        Ok(AblationRecord { layer_index: layer, unit_index: index, predicted: -snip.signed[entry][index], actual, batch_id })
    });
    results.into_iter().collect()
}

/// Gradient-norm ablations of every `stride`-th prunable unit against the
/// structured GraSP prediction `−2·score`.
pub fn structured_gradnorm_ablations<T: Real>(
    model: &ModelGraph<T>,
    images: &Tensor<T>,
    labels: &[usize],
    temperature: f64,
    stride: usize,
    batch_id: u64,
) -> Result<Vec<AblationRecord>> {
    let scores = score_grasp_structured_mode(model, images, labels, temperature, Mode::Eval)?;
    let base = grad_sq_norm(model, images, labels, MaskInput::None, temperature)?;
    let targets: Vec<(usize, usize, usize)> = scores
        .layers
        .iter()
        .enumerate()
        .flat_map(|(k, &layer)| (0..scores.signed[k].len()).map(move |u| (k, layer, u)))
        .enumerate()
        .filter_map(|(i, t)| (i % stride.max(1) == stride.max(1) / 2).then_some(t))
        .collect();
    let results = par::map_indexed(targets.len(), |t| -> Result<AblationRecord> {
        let (k, layer, unit) = targets[t];
        let masks = MaskInput::Values(mask_without(model, layer, unit)?.values());
        let actual = grad_sq_norm(model, images, labels, masks, temperature)? - base;
        Ok(AblationRecord { layer_index: layer, unit_index: unit, predicted: -2.0 * scores.signed[k][unit], actual, batch_id })
    });
    results.into_iter().collect()
}

/// Average ranks (1-based) with ties sharing the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn distinct(x: &[f64]) -> usize {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v.len()
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape(format!("{} vs {} values", x.len(), y.len())));
    }
    if distinct(x) < 2 || distinct(y) < 2 {
        return Err(Error::invalid("rank correlation needs at least two distinct values per side"));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub rank: usize,
    pub predicted: f64,
    pub actual: f64,
    /// Min-max normalized copies for plotting.
    pub predicted_norm: f64,
    pub actual_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankSummary {
    pub rho: f64,
    pub n: usize,
    /// Records sorted by prediction (ascending).
    pub rows: Vec<CalibrationRow>,
}

fn min_max(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    v.iter().map(|x| if hi > lo { (x - lo) / (hi - lo) } else { 0.0 }).collect()
}

pub fn rank_correlation(records: &[AblationRecord]) -> Result<RankSummary> {
    if records.len() < 10 {
        return Err(Error::invalid(format!("rank correlation needs at least 10 records, got {}", records.len())));
    }
    let p: Vec<f64> = records.iter().map(|r| r.predicted).collect();
    let a: Vec<f64> = records.iter().map(|r| r.actual).collect();
    let rho = spearman(&p, &a)?;
    let (pn, an) = (min_max(&p), min_max(&a));
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&i, &j| p[i].total_cmp(&p[j]).then(i.cmp(&j)));
    let rows = order
        .into_iter()
        .enumerate()
        .map(|(rank, i)| CalibrationRow { rank, predicted: p[i], actual: a[i], predicted_norm: pn[i], actual_norm: an[i] })
        .collect();
    Ok(RankSummary { rho, n: records.len(), rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub a: (usize, usize),
    pub b: (usize, usize),
    pub delta_a: f64,
    pub delta_b: f64,
    pub delta_both: f64,
    /// `Δ(both) − Δ(a) − Δ(b)`
    pub interaction: f64,
}

/// Loss changes of random unit pairs versus the sum of their single changes.
pub fn additivity_pairs<T: Real>(model: &ModelGraph<T>, images: &Tensor<T>, labels: &[usize], pairs: usize, seed: u64) -> Result<Vec<PairRecord>> {
    let units: Vec<(usize, usize)> = model
        .prunable_layers()
        .into_iter()
        .flat_map(|i| (0..model.layers[i].out_units().unwrap()).map(move |u| (i, u)))
        .collect();
    if units.len() < 2 {
        return Err(Error::invalid("need at least two prunable units"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<(usize, usize)> = (0..pairs)
        .map(|_| {
            let v = sample(&mut rng, units.len(), 2).into_vec();
            (v[0], v[1])
        })
        .collect();
    let base = eval_loss(model, images, labels, MaskInput::None)?;
    let results = par::map_indexed(picks.len(), |k| -> Result<PairRecord> {
        let (a, b) = (units[picks[k].0], units[picks[k].1]);
        let single = |u: (usize, usize)| -> Result<f64> {
            Ok(eval_loss(model, images, labels, MaskInput::Values(mask_without(model, u.0, u.1)?.values()))? - base)
        };
        let mut both = mask_without(model, a.0, a.1)?;
        if let Some(e) = both.entries.iter_mut().find(|e| e.layer == b.0) {
            e.keep[b.1] = false;
        }
        let delta_both = eval_loss(model, images, labels, MaskInput::Values(both.values()))? - base;
        let (delta_a, delta_b) = (single(a)?, single(b)?);
        Ok(PairRecord { a, b, delta_a, delta_b, delta_both, interaction: delta_both - delta_a - delta_b })
    });
    results.into_iter().collect()
}

/// Signed per-unit sum `Σ θ·∂L/∂θ` over the parameters a unit's mask gates
/// directly: the BN scale and shift when a BN follows the unit, otherwise the
/// unit's incoming weights and bias. Computed on the masked graph at `m̂ = 1`.
pub fn gated_parameter_sums<T: Real>(model: &ModelGraph<T>, images: &Tensor<T>, labels: &[usize], mode: Mode) -> Result<Vec<Vec<f64>>> {
    let opts = ForwardOptions { mode, masks: MaskInput::ones(model), param_grads: true };
    let mut pass = ForwardPass::run(model, images, opts)?;
    let l = pass.loss(labels, T::one())?;
    pass.backward(l)?;
    let mut out = Vec::new();
    for i in model.prunable_layers() {
        let at = model.mask_point(i);
        let params = model.layers[at].params();
        let grads: Vec<Tensor<T>> = pass.param_nodes[at].iter().map(|&id| pass.graph.grad_or_zero(id)).collect();
        let units = model.layers[i].out_units().unwrap();
        let mut sums = vec![0.0f64; units];
        for (p, g) in params.iter().zip(&grads) {
            let per = p.numel() / units;
            for (k, (w, d)) in p.data().iter().zip(g.data()).enumerate() {
                sums[k / per] += w.as_f64() * d.as_f64();
            }
        }
        out.push(sums);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub criterion: String,
    pub granularity: String,
    pub rho: f64,
    pub n: usize,
}

/// `layer_index,unit_index,predicted,actual,batch_id`
pub fn write_records_csv(records: &[AblationRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    for r in records {
        w.serialize(r).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `rank,predicted,actual,predicted_norm,actual_norm`
pub fn write_calibration_csv(summary: &RankSummary, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    for r in &summary.rows {
        w.serialize(r).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Random uniform `[-1, 1)` batch with labels cycling over `classes`.
pub fn random_batch<T: Real>(shape: [usize; 4], classes: usize, seed: u64) -> (Tensor<T>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-1.0..1.0))).collect();
    (Tensor::new(shape.to_vec(), data).expect("shape"), (0..shape[0]).map(|i| i % classes.max(1)).collect())
}
