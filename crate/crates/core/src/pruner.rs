//! Global threshold selection and model surgery.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compute::total_flops;
use crate::diffcore::Real;
use crate::error::{Error, Result};
use crate::netgraph::{he_init, save_checkpoint, Layer, MaskSet, ModelGraph, UnitMask};
use crate::scoring::{Criterion, ScoreSet};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectOptions {
    /// Never prune the last surviving unit of a layer.
    pub keep_one_per_layer: bool,
}

/// Result of [`threshold_select`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub masks: MaskSet,
    /// Value of the `⌊p·N⌋`-th smallest score, `None` when nothing is pruned.
    pub threshold: Option<f64>,
    pub prune_count: usize,
}

/// Pools all scores, prunes exactly `⌊p·N⌋` of the lowest ones and keeps the
/// rest. Ties are pruned in ascending (layer, unit) order.
pub fn threshold_select(scores: &ScoreSet, p: f64) -> Result<Selection> {
    threshold_select_with(scores, p, SelectOptions::default())
}

pub fn threshold_select_with(scores: &ScoreSet, p: f64, opts: SelectOptions) -> Result<Selection> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("prune ratio {p} outside [0, 1)")));
    }
    let flat = scores.flat();
    if flat.is_empty() {
        return Err(Error::invalid("empty score pool"));
    }
    if let Some(v) = flat.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("score {v}")));
    }
    let n = flat.len();
    let prune_count = (p * n as f64).floor() as usize;
    // owner layer (position in scores.layers) of each flat entry
    let owner: Vec<usize> = scores.values.iter().enumerate().flat_map(|(k, v)| std::iter::repeat_n(k, v.len())).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| flat[a].total_cmp(&flat[b]).then(a.cmp(&b)));

    let mut keep = vec![true; n];
    let mut left: Vec<usize> = scores.values.iter().map(Vec::len).collect();
    let mut pruned = 0;
    let mut threshold = None;
    for &idx in &order {
        if pruned == prune_count {
            break;
        }
        if opts.keep_one_per_layer && left[owner[idx]] == 1 {
            continue;
        }
        keep[idx] = false;
        left[owner[idx]] -= 1;
        pruned += 1;
        threshold = Some(flat[idx]);
    }
    if pruned < prune_count {
        return Err(Error::invalid(format!("cannot prune {prune_count} units while keeping one per layer")));
    }
    let mut off = 0;
    let entries = scores
        .layers
        .iter()
        .zip(&scores.values)
        .map(|(&layer, v)| {
            let e = UnitMask { layer, keep: keep[off..off + v.len()].to_vec() };
            off += v.len();
            e
        })
        .collect();
    Ok(Selection { masks: MaskSet { entries }, threshold, prune_count })
}

/// First layer left with no surviving unit.
pub fn collapsed_layer(masks: &MaskSet) -> Option<usize> {
    masks.entries.iter().find(|e| e.kept() == 0).map(|e| e.layer)
}

fn kept_indices(m: &UnitMask) -> Vec<usize> {
    m.keep.iter().enumerate().filter_map(|(i, &k)| k.then_some(i)).collect()
}

/// Physically removes masked units and everything that depends on them:
/// bias and BN entries of the unit, and the matching input slices of the
/// next conv or linear layer (through flatten, channel `c` owns features
/// `[c·S, (c+1)·S)` with `S` the flattened spatial size).
pub fn shrink<T: Real>(model: &ModelGraph<T>, masks: &MaskSet) -> Result<ModelGraph<T>> {
    masks.validate(model)?;
    if let Some(layer) = collapsed_layer(masks) {
        return Err(Error::Disconnection { layer });
    }
    let shapes = model.activation_shapes()?;
    let mut out = model.clone();
    // surviving channels/features of the current activation; None = all
    let mut alive: Option<Vec<usize>> = None;
    for (i, layer) in out.layers.iter_mut().enumerate() {
        match layer {
            Layer::Conv(c) => {
                if let Some(a) = &alive {
                    c.weight = c.weight.select(1, a);
                }
                alive = masks.get(i).map(kept_indices);
                if let Some(a) = &alive {
                    c.weight = c.weight.select(0, a);
                    c.bias = c.bias.select(0, a);
                }
            }
            Layer::Linear(l) => {
                if let Some(a) = &alive {
                    l.weight = l.weight.select(1, a);
                }
                alive = masks.get(i).map(kept_indices);
                if let Some(a) = &alive {
                    l.weight = l.weight.select(0, a);
                    l.bias = l.bias.select(0, a);
                }
            }
            Layer::BatchNorm(b) => {
                if let Some(a) = &alive {
                    b.gamma = b.gamma.select(0, a);
                    b.beta = b.beta.select(0, a);
                    b.running_mean = a.iter().map(|&j| b.running_mean[j]).collect();
                    b.running_var = a.iter().map(|&j| b.running_var[j]).collect();
                }
            }
            Layer::Flatten => {
                if let Some(a) = &alive {
                    let input = if i == 0 { model.input_shape.to_vec() } else { shapes[i - 1].clone() };
                    let s: usize = input[1..].iter().product();
                    alive = Some(a.iter().flat_map(|&c| c * s..(c + 1) * s).collect());
                }
            }
            Layer::Relu | Layer::MaxPool | Layer::AvgPool { .. } => {}
        }
    }
    out.activation_shapes()?;
    Ok(out)
}

/// Multiplies each conv/linear layer's weights by `√(orig_width / width)`.
/// `original` is [`ModelGraph::widths`] of the unpruned model.
pub fn rescale<T: Real>(model: &ModelGraph<T>, original: &[(usize, usize)]) -> Result<ModelGraph<T>> {
    let mut out = model.clone();
    for &(i, orig) in original {
        let layer = out.layers.get_mut(i).ok_or_else(|| Error::shape(format!("no layer {i} in pruned model")))?;
        let now = layer.out_units().ok_or_else(|| Error::shape(format!("layer {i} has no output units")))?;
        if now == 0 {
            return Err(Error::Disconnection { layer: i });
        }
        if now == orig {
            continue;
        }
        let f = T::lit((orig as f64 / now as f64).sqrt());
        let w = match layer {
            Layer::Conv(c) => &mut c.weight,
            Layer::Linear(l) => &mut l.weight,
            _ => unreachable!("out_units is Some only for conv/linear"),
        };
        w.data_mut().iter_mut().for_each(|v| *v *= f);
    }
    Ok(out)
}

/// Fresh He initialization of the (pruned) architecture.
pub fn reinit<T: Real>(model: &ModelGraph<T>, seed: u64) -> ModelGraph<T> {
    let mut out = model.clone();
    he_init(&mut out, seed);
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PostPrune {
    Rescale,
    Reinit,
    #[default]
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCount {
    pub layer: usize,
    pub kept: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub criterion: Criterion,
    pub prune_ratio: f64,
    pub lambda: Option<f64>,
    pub threshold: Option<f64>,
    pub layers: Vec<LayerCount>,
    pub units_total: usize,
    pub units_pruned: usize,
    pub params_before: usize,
    pub params_after: usize,
    pub flops_before: u64,
    pub flops_after: u64,
    pub prune_ms: f64,
    /// Layer left without units, if any.
    pub disconnected_layer: Option<usize>,
}

impl PruneReport {
    /// Report for a completed surgery. `after` is `None` on disconnection.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        criterion: Criterion,
        prune_ratio: f64,
        lambda: Option<f64>,
        threshold: Option<f64>,
        before: &ModelGraph<T>,
        after: Option<&ModelGraph<T>>,
        masks: &MaskSet,
        prune_ms: f64,
    ) -> Result<Self> {
        let flops_before = total_flops(before)?.total();
        Ok(PruneReport {
            criterion,
            prune_ratio,
            lambda,
            threshold,
            layers: masks.entries.iter().map(|e| LayerCount { layer: e.layer, kept: e.kept(), total: e.keep.len() }).collect(),
            units_total: masks.total_units(),
            units_pruned: masks.pruned_units(),
            params_before: before.param_count(),
            params_after: after.map_or(0, ModelGraph::param_count),
            flops_before,
            flops_after: match after {
                Some(m) => total_flops(m)?.total(),
                None => 0,
            },
            prune_ms,
            disconnected_layer: collapsed_layer(masks),
        })
    }

    pub fn flop_reduction(&self) -> f64 {
        1.0 - self.flops_after as f64 / self.flops_before as f64
    }
}

/// Writes the pruned checkpoint plus `kept.json` (the unit bitmap relative to
/// the original architecture) and `report.json`.
pub fn save_pruned<T: Real>(dir: &Path, model: &ModelGraph<T>, masks: &MaskSet, report: &PruneReport) -> Result<u64> {
    let bytes = save_checkpoint(model, dir)?;
    let write = |name: &str, body: String| {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };
    write("kept.json", serde_json::to_string(masks)?)?;
    write("report.json", serde_json::to_string_pretty(report)?)?;
    Ok(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{Mode, Tensor};
    use crate::netgraph::{build_vgg_like, VggLayout};
    use crate::scoring::ScoreMeta;

    fn set(values: Vec<Vec<f64>>) -> ScoreSet {
        ScoreSet {
            criterion: Criterion::ThreeSp,
            layers: (0..values.len()).collect(),
            signed: values.clone(),
            values,
            meta: ScoreMeta::default(),
        }
    }

    #[test]
    fn threshold_examples() {
        let s = set(vec![vec![0.1, 0.4], vec![0.2, 0.9]]);
        let sel = threshold_select(&s, 0.5).unwrap();
        assert_eq!(sel.masks.entries[0].keep, vec![false, true]);
        assert_eq!(sel.masks.entries[1].keep, vec![false, true]);
        assert_eq!(sel.threshold, Some(0.2));
        assert_eq!(threshold_select(&s, 0.0).unwrap().masks.pruned_units(), 0);

        let tied = set(vec![vec![1.0; 3], vec![1.0; 5]]);
        let sel = threshold_select(&tied, 0.25).unwrap();
        assert_eq!(sel.masks.entries[0].keep, vec![false, false, true]);
        assert_eq!(sel.masks.entries[1].kept(), 5);
        assert!(threshold_select(&tied, 1.0).is_err());
        assert!(threshold_select(&set(vec![]), 0.5).is_err());
    }

    #[test]
    fn keep_one_guard() {
        let s = set(vec![vec![0.1, 0.2], vec![5.0, 6.0, 7.0]]);
        assert_eq!(collapsed_layer(&threshold_select(&s, 0.4).unwrap().masks), Some(0));
        let g = threshold_select_with(&s, 0.4, SelectOptions { keep_one_per_layer: true }).unwrap();
        assert_eq!(g.masks.pruned_units(), 2);
        assert_eq!(g.masks.entries[0].keep, vec![false, true]);
        assert_eq!(g.masks.entries[1].keep, vec![false, true, true]);
    }

    fn model() -> ModelGraph<f64> {
        let layout = VggLayout { blocks: vec![(4, 1), (6, 1)], hidden: vec![5], avgpool: (2, 2) };
        let mut m = build_vgg_like::<f64>([2, 8, 8], 3, &layout).unwrap();
        crate::netgraph::he_init(&mut m, 11);
        m
    }

    #[test]
    fn shrink_matches_masked_forward() {
        let m = model();
        let mut masks = m.all_ones_mask();
        masks.entries[0].keep[1] = false;
        masks.entries[1].keep[0] = false;
        masks.entries[1].keep[4] = false;
        masks.entries[2].keep[2] = false;
        let small = shrink(&m, &masks).unwrap();
        assert_eq!(small.widths().iter().map(|w| w.1).collect::<Vec<_>>(), vec![3, 4, 4, 3]);
        let x = Tensor::from_f64(&[2, 2, 8, 8], &(0..256).map(|i| ((i * 37) % 17) as f64 / 8.0 - 1.0).collect::<Vec<_>>()).unwrap();
        let a = small.predict(&x).unwrap();
        let b = m.forward_masked(&masks, &x, Mode::Eval).unwrap();
        assert!(a.max_rel_diff(&b, 1e-12) < 1e-10);
        assert_eq!(shrink(&m, &m.all_ones_mask()).unwrap(), m);
    }

    #[test]
    fn collapsed_layer_is_a_disconnection() {
        let m = model();
        let mut masks = m.all_ones_mask();
        masks.entries[1].keep.fill(false);
        let layer = masks.entries[1].layer;
        assert!(matches!(shrink(&m, &masks), Err(Error::Disconnection { layer: l }) if l == layer));
    }

    #[test]
    fn rescale_factor() {
        let m = model();
        let orig = m.widths();
        assert_eq!(rescale(&m, &orig).unwrap(), m);
        let mut masks = m.all_ones_mask();
        masks.entries[1].keep = vec![true, false, false, true, false, false];
        let small = shrink(&m, &masks).unwrap();
        let r = rescale(&small, &orig).unwrap();
        let (Layer::Conv(a), Layer::Conv(b)) = (&small.layers[masks.entries[1].layer], &r.layers[masks.entries[1].layer]) else { panic!() };
        for (x, y) in a.weight.data().iter().zip(b.weight.data()) {
            assert!((y - x * 3f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn reinit_ignores_old_weights() {
        let m = model();
        let mut other = m.clone();
        crate::netgraph::he_init(&mut other, 99);
        assert_eq!(reinit(&m, 5), reinit(&other, 5));
    }

    #[test]
    fn report_totals() {
        let m = model();
        let mut masks = m.all_ones_mask();
        masks.entries[0].keep[0] = false;
        let small = shrink(&m, &masks).unwrap();
        let r = PruneReport::new(Criterion::ThreeSp, 0.1, None, None, &m, Some(&small), &masks, 1.0).unwrap();
        assert_eq!(r.layers.iter().map(|l| l.kept).sum::<usize>(), r.units_total - r.units_pruned);
        assert_eq!(r.flops_after, total_flops(&small).unwrap().total());
        assert!(r.flops_after < r.flops_before && r.params_after < r.params_before);
    }
}
