//! Score, select, shrink: the whole single-shot pruning procedure.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::compute::{total_flops, CostTable};
use crate::diffcore::{Real, Tensor};
use crate::error::{Error, Result};
use crate::netgraph::{Layer, MaskSet, ModelGraph};
use crate::pruner::{collapsed_layer, reinit, rescale, shrink, threshold_select_with, LayerCount, PostPrune, PruneReport, SelectOptions};
use crate::scoring::{
    retention_scores, score_3sp, score_grasp_structured, score_grasp_unstructured, score_snip_unstructured, uniform_mask, Criterion,
    ScoreMeta, ScoreSet, WeightScores, DEFAULT_GRASP_TEMPERATURE,
};

/// What to prune and how far.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneSpec {
    pub criterion: Criterion,
    /// Fraction of units (or weights) to prune.
    pub ratio: Option<f64>,
    /// Fraction of total FLOPs to remove; the ratio is searched for.
    pub flop_target: Option<f64>,
    pub lambda: f64,
    pub post: PostPrune,
    pub keep_one_per_layer: bool,
    pub temperature: f64,
    /// Seed for uniform masks and re-initialization.
    pub seed: u64,
}

impl Default for PruneSpec {
    fn default() -> Self {
        PruneSpec {
            criterion: Criterion::ThreeSp,
            ratio: Some(0.5),
            flop_target: None,
            lambda: 0.0,
            post: PostPrune::None,
            keep_one_per_layer: false,
            temperature: DEFAULT_GRASP_TEMPERATURE,
            seed: 0,
        }
    }
}

impl PruneSpec {
    pub fn validate(&self) -> Result<()> {
        match (self.ratio, self.flop_target) {
            (Some(p), None) if (0.0..1.0).contains(&p) => Ok(()),
            (None, Some(t)) if t > 0.0 && t < 1.0 => Ok(()),
            (Some(_), Some(_)) | (None, None) => Err(Error::invalid("set exactly one of prune ratio and FLOP target")),
            _ => Err(Error::invalid(format!("ratio {:?} / FLOP target {:?} out of range", self.ratio, self.flop_target))),
        }
    }
}

pub struct PruneOutcome<T> {
    pub model: ModelGraph<T>,
    /// Unit masks relative to the original model (structured criteria).
    pub masks: Option<MaskSet>,
    pub scores: Option<ScoreSet>,
    pub report: PruneReport,
    pub ratio: f64,
}

/// Iterations and tolerance of the FLOP-target search.
pub const FLOP_SEARCH_ITERS: usize = 20;
pub const FLOP_SEARCH_TOL: f64 = 0.01;

/// Structured ranking for `criterion` (`None` for the uniform baseline).
pub fn structured_scores<T: Real>(
    model: &ModelGraph<T>,
    images: &Tensor<T>,
    labels: &[usize],
    spec: &PruneSpec,
) -> Result<Option<ScoreSet>> {
    Ok(match spec.criterion {
        Criterion::ThreeSp => Some(score_3sp(model, images, labels)?),
        Criterion::ThreeSpCa => Some(retention_scores(&score_3sp(model, images, labels)?, &CostTable::for_model(model, spec.lambda)?)?),
        Criterion::GraspStructured => Some(score_grasp_structured(model, images, labels, spec.temperature)?),
        Criterion::Uniform => None,
        Criterion::Snip | Criterion::Grasp => return Err(Error::invalid(format!("{} is an unstructured criterion", spec.criterion))),
    })
}

fn select<T: Real>(model: &ModelGraph<T>, scores: Option<&ScoreSet>, p: f64, spec: &PruneSpec) -> Result<(MaskSet, Option<f64>)> {
    match scores {
        Some(s) => {
            let sel = threshold_select_with(s, p, SelectOptions { keep_one_per_layer: spec.keep_one_per_layer })?;
            Ok((sel.masks, sel.threshold))
        }
        None => {
            let mut m = uniform_mask(model, p, spec.seed)?;
            if spec.keep_one_per_layer {
                for e in &mut m.entries {
                    if e.kept() == 0 {
                        e.keep[0] = true;
                    }
                }
            }
            Ok((m, None))
        }
    }
}

/// FLOPs of the model shrunk by `masks`, `None` on disconnection.
fn flops_after<T: Real>(model: &ModelGraph<T>, masks: &MaskSet) -> Result<Option<u64>> {
    if collapsed_layer(masks).is_some() {
        return Ok(None);
    }
    Ok(Some(total_flops(&shrink(model, masks)?)?.total()))
}

/// Binary search over the prune ratio for a FLOP reduction of `target`.
pub fn search_ratio<T: Real>(model: &ModelGraph<T>, scores: Option<&ScoreSet>, target: f64, spec: &PruneSpec) -> Result<f64> {
    let f0 = total_flops(model)?.total() as f64;
    let want = (1.0 - target) * f0;
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut best: Option<(f64, f64)> = None;
    for _ in 0..FLOP_SEARCH_ITERS {
        let p = 0.5 * (lo + hi);
        let (masks, _) = select(model, scores, p, spec)?;
        match flops_after(model, &masks)? {
            Some(f) => {
                let err = (f as f64 - want).abs();
                if best.is_none_or(|(_, e)| err < e) {
                    best = Some((p, err));
                }
                if err <= FLOP_SEARCH_TOL * want {
                    return Ok(p);
                }
                if (f as f64) > want {
                    lo = p;
                } else {
                    hi = p;
                }
            }
            None => hi = p,
        }
    }
    let reason = match best {
        Some((p, err)) => format!("closest ratio {p:.4} misses by {:.2}% of the target FLOPs", 100.0 * err / want),
        None => "every probed ratio disconnects the network".to_string(),
    };
    Err(Error::UnreachableFlopTarget { target, reason })
}

/// Runs scoring, selection, surgery and the post-prune weight treatment.
/// Structured criteria only; see [`prune_unstructured`] for weight-level ones.
pub fn prune<T: Real>(model: &ModelGraph<T>, images: &Tensor<T>, labels: &[usize], spec: &PruneSpec) -> Result<PruneOutcome<T>> {
    spec.validate()?;
    let t0 = Instant::now();
    let scores = structured_scores(model, images, labels, spec)?;
    let ratio = match (spec.ratio, spec.flop_target) {
        (Some(p), _) => p,
        (None, Some(t)) => search_ratio(model, scores.as_ref(), t, spec)?,
        (None, None) => unreachable!("validated"),
    };
    let (masks, threshold) = select(model, scores.as_ref(), ratio, spec)?;
    let shrunk = shrink(model, &masks)?;
    let prune_ms = t0.elapsed().as_secs_f64() * 1e3;
    let out = match spec.post {
        PostPrune::None => shrunk,
        PostPrune::Rescale => rescale(&shrunk, &model.widths())?,
        PostPrune::Reinit => reinit(&shrunk, spec.seed),
    };
    let lambda = (spec.criterion == Criterion::ThreeSpCa).then_some(spec.lambda);
    let report = PruneReport::new(spec.criterion, ratio, lambda, threshold, model, Some(&out), &masks, prune_ms)?;
    Ok(PruneOutcome { model: out, masks: Some(masks), scores, report, ratio })
}

fn unstructured_scores<T: Real>(model: &ModelGraph<T>, images: &Tensor<T>, labels: &[usize], spec: &PruneSpec) -> Result<(WeightScores, Vec<Vec<f64>>)> {
    Ok(match spec.criterion {
        Criterion::Snip => {
            let w = score_snip_unstructured(model, images, labels)?;
            let v = w.signed.iter().map(|l| l.iter().map(|x| x.abs()).collect()).collect();
            (w, v)
        }
        Criterion::Grasp => {
            let w = score_grasp_unstructured(model, images, labels, spec.temperature)?;
            let v = w.signed.clone();
            (w, v)
        }
        c => return Err(Error::invalid(format!("{c} is a structured criterion"))),
    })
}

/// Weight-level pruning by masking: pruned weights are set to zero, the
/// architecture is unchanged. Report unit counts are weight counts.
pub fn prune_unstructured<T: Real>(model: &ModelGraph<T>, images: &Tensor<T>, labels: &[usize], spec: &PruneSpec) -> Result<PruneOutcome<T>> {
    spec.validate()?;
    let ratio = spec.ratio.ok_or_else(|| Error::invalid("unstructured pruning needs a prune ratio"))?;
    let t0 = Instant::now();
    let (w, values) = unstructured_scores(model, images, labels, spec)?;
    let pooled = ScoreSet { criterion: spec.criterion, layers: w.layers.clone(), signed: w.signed.clone(), values, meta: ScoreMeta::default() };
    let sel = threshold_select_with(&pooled, ratio, SelectOptions::default())?;
    let mut out = model.clone();
    for e in &sel.masks.entries {
        let wt = match &mut out.layers[e.layer] {
            Layer::Conv(c) => &mut c.weight,
            Layer::Linear(l) => &mut l.weight,
            _ => unreachable!("weight layers only"),
        };
        wt.data_mut().iter_mut().zip(&e.keep).filter(|(_, &k)| !k).for_each(|(v, _)| *v = T::zero());
    }
    let prune_ms = t0.elapsed().as_secs_f64() * 1e3;
    let flops = total_flops(model)?.total();
    let report = PruneReport {
        criterion: spec.criterion,
        prune_ratio: ratio,
        lambda: None,
        threshold: sel.threshold,
        layers: sel.masks.entries.iter().map(|e| LayerCount { layer: e.layer, kept: e.kept(), total: e.keep.len() }).collect(),
        units_total: sel.masks.total_units(),
        units_pruned: sel.masks.pruned_units(),
        params_before: model.param_count(),
        params_after: model.param_count() - sel.masks.pruned_units(),
        flops_before: flops,
        flops_after: flops,
        prune_ms,
        disconnected_layer: None,
    };
    Ok(PruneOutcome { model: out, masks: None, scores: Some(pooled), report, ratio })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{he_init, tiny_vgg};
    use crate::oracle::random_batch;

    fn setup() -> (ModelGraph<f32>, Tensor<f32>, Vec<usize>) {
        let mut m = tiny_vgg::<f32>(10, 0.125).unwrap();
        he_init(&mut m, 3);
        let (x, y) = random_batch([8, 3, 32, 32], 10, 1);
        (m, x, y)
    }

    #[test]
    fn ratio_zero_changes_nothing() {
        let (m, x, y) = setup();
        let o = prune(&m, &x, &y, &PruneSpec { ratio: Some(0.0), ..PruneSpec::default() }).unwrap();
        assert_eq!(o.report.units_pruned, 0);
        assert_eq!(o.report.flops_after, o.report.flops_before);
        assert_eq!(o.model, m);
    }

    #[test]
    fn flop_target_is_met() {
        let (m, x, y) = setup();
        let spec = PruneSpec { ratio: None, flop_target: Some(0.5), keep_one_per_layer: true, ..PruneSpec::default() };
        let o = prune(&m, &x, &y, &spec).unwrap();
        let want = 0.5 * o.report.flops_before as f64;
        assert!((o.report.flops_after as f64 - want).abs() <= 0.01 * want, "{:?}", o.report);
    }

    #[test]
    fn spec_needs_exactly_one_target() {
        assert!(PruneSpec { ratio: Some(0.5), flop_target: Some(0.5), ..PruneSpec::default() }.validate().is_err());
        assert!(PruneSpec { ratio: None, flop_target: None, ..PruneSpec::default() }.validate().is_err());
        assert!(PruneSpec { ratio: Some(1.0), ..PruneSpec::default() }.validate().is_err());
    }

    #[test]
    fn unstructured_zeroes_weights() {
        let (m, x, y) = setup();
        let spec = PruneSpec { criterion: Criterion::Snip, ratio: Some(0.3), ..PruneSpec::default() };
        let o = prune_unstructured(&m, &x, &y, &spec).unwrap();
        let zeros = |g: &ModelGraph<f32>| g.params().iter().flat_map(|t| t.data()).filter(|&&v| v == 0.0).count();
        assert_eq!(zeros(&o.model), zeros(&m) + o.report.units_pruned);
        assert!(prune(&m, &x, &y, &spec).is_err());
    }
}
