//! FLOP accounting.
//!
//! One multiply-accumulate counts as two FLOPs. Per-unit cost charges a unit
//! only for computing its own output: `2·H·W·C_in·K²` for a conv channel
//! (H, W the output extent) and `2·F` for a linear unit.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Real, Tensor};
use crate::error::{Error, Result};
use crate::netgraph::{ForwardOptions, ForwardPass, Layer, LayerSpec, MaskSet, ModelGraph};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitKind {
    Conv,
    Linear,
}

/// Geometry that determines one output unit's cost. Linear layers use
/// `H = W = K = 1` with `in_channels` = fan-in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitGeometry {
    pub kind: UnitKind,
    pub in_channels: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
}

impl UnitGeometry {
    pub fn linear(fan_in: usize) -> Self {
        UnitGeometry { kind: UnitKind::Linear, in_channels: fan_in, out_h: 1, out_w: 1, kernel: 1 }
    }
}

pub fn unit_cost(g: &UnitGeometry) -> f64 {
    2.0 * (g.out_h * g.out_w * g.in_channels * g.kernel * g.kernel) as f64
}

/// Laplace smoothing then max-normalization:
/// `c̄_l = (c_l + λ) / Σ_j (c_j + λ)`, `c̃_l = c̄_l / max_j c̄_j`.
pub fn smooth_normalize(costs: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if costs.is_empty() {
        return Err(Error::invalid("empty cost list"));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::invalid(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    if let Some(c) = costs.iter().find(|&&c| !(c > 0.0) || !c.is_finite()) {
        return Err(Error::invalid(format!("costs must be positive and finite, got {c}")));
    }
    let total: f64 = costs.iter().map(|c| c + lambda).sum();
    let smoothed: Vec<f64> = costs.iter().map(|c| (c + lambda) / total).collect();
    let max = smoothed.iter().copied().fold(f64::MIN, f64::max);
    Ok(smoothed.into_iter().map(|c| c / max).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: usize,
    pub geometry: UnitGeometry,
    /// Raw per-unit cost c_l in FLOPs.
    pub unit_cost: f64,
    /// Smoothed, normalized cost c̃_l in (0, 1].
    pub normalized: f64,
}

/// Per-unit costs of every prunable layer, aligned with the model's masks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    pub lambda: f64,
    pub layers: Vec<LayerCost>,
}

impl CostTable {
    pub fn for_model<T: Real>(model: &ModelGraph<T>, lambda: f64) -> Result<Self> {
        let geoms = unit_geometries(model)?;
        let raw: Vec<f64> = geoms.iter().map(|(_, g)| unit_cost(g)).collect();
        let norm = smooth_normalize(&raw, lambda)?;
        Ok(CostTable {
            lambda,
            layers: geoms
                .into_iter()
                .zip(raw)
                .zip(norm)
                .map(|(((layer, geometry), unit_cost), normalized)| LayerCost { layer, geometry, unit_cost, normalized })
                .collect(),
        })
    }

    pub fn normalized(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.normalized).collect()
    }
}

/// Unit geometry of each prunable layer under the model's input shape.
pub fn unit_geometries<T: Real>(model: &ModelGraph<T>) -> Result<Vec<(usize, UnitGeometry)>> {
    let shapes = model.activation_shapes()?;
    model
        .prunable_layers()
        .into_iter()
        .map(|i| {
            let g = match model.layers[i].spec() {
                LayerSpec::Conv { in_channels, kernel, .. } => UnitGeometry {
                    kind: UnitKind::Conv,
                    in_channels,
                    out_h: shapes[i][1],
                    out_w: shapes[i][2],
                    kernel,
                },
                LayerSpec::Linear { in_features, .. } => UnitGeometry::linear(in_features),
                other => return Err(Error::invalid(format!("layer {i} ({}) has no unit cost", other.kind()))),
            };
            Ok((i, g))
        })
        .collect()
}

/// Closed-form per-example FLOPs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCount {
    /// `2 × MACs` of conv and linear layers.
    pub mac_flops: u64,
    /// Bias adds, batch norm, activations and pooling.
    pub other_flops: u64,
    pub per_layer: Vec<u64>,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.mac_flops + self.other_flops
    }
}

/// Closed-form FLOPs of one example through the model.
///
/// Conv: `2·H'·W'·C_out·C_in·K²` plus `H'·W'·C_out` bias adds; linear
/// `2·U·F + U`; batch norm 2 per element (scale, shift); relu 1 per element;
/// 2×2 max pool 3 comparisons per output; average pool 1 per input element.
pub fn total_flops<T: Real>(model: &ModelGraph<T>) -> Result<FlopCount> {
    let shapes = model.activation_shapes()?;
    let mut mac_flops = 0u64;
    let mut other = 0u64;
    let mut per_layer = Vec::with_capacity(model.layers.len());
    let mut input: Vec<usize> = model.input_shape.to_vec();
    for (i, layer) in model.layers.iter().enumerate() {
        let out = &shapes[i];
        let out_elems: u64 = out.iter().product::<usize>() as u64;
        let in_elems: u64 = input.iter().product::<usize>() as u64;
        let (macs, rest) = match layer {
            Layer::Conv(c) => {
                let s = c.weight.shape();
                let macs = out_elems * (s[1] * s[2] * s[3]) as u64;
                (macs, out_elems)
            }
            Layer::Linear(l) => (out_elems * l.weight.shape()[1] as u64, out_elems),
            Layer::BatchNorm(_) => (0, 2 * out_elems),
            Layer::Relu => (0, out_elems),
            Layer::MaxPool => (0, 3 * out_elems),
            Layer::AvgPool { .. } => (0, in_elems),
            Layer::Flatten => (0, 0),
        };
        mac_flops += 2 * macs;
        other += rest;
        per_layer.push(2 * macs + rest);
        input = out.clone();
    }
    Ok(FlopCount { mac_flops, other_flops: other, per_layer })
}

/// Multiply-accumulates counted by the conv/linear kernels during an actual
/// single-example forward pass.
pub fn instrumented_macs<T: Real>(model: &ModelGraph<T>) -> Result<u64> {
    let [c, h, w] = model.input_shape;
    let pass = ForwardPass::run(model, &Tensor::zeros(&[1, c, h, w]), ForwardOptions::eval())?;
    Ok(pass.graph.counters().macs)
}

/// One row of the FLOP audit CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopAuditRow {
    pub layer_index: usize,
    pub kind: String,
    pub units_total: usize,
    pub units_kept: usize,
    pub unit_cost: f64,
    pub layer_flops_before: u64,
    pub layer_flops_after: u64,
}

/// Per-layer FLOPs of `before` and its pruned counterpart `after` (same
/// layer list, as produced by surgery).
pub fn flop_audit<T: Real>(before: &ModelGraph<T>, after: &ModelGraph<T>, masks: &MaskSet) -> Result<Vec<FlopAuditRow>> {
    if before.layers.len() != after.layers.len() {
        return Err(Error::shape("audit needs models with the same layer list"));
    }
    let fb = total_flops(before)?;
    let fa = total_flops(after)?;
    let costs: std::collections::HashMap<usize, f64> =
        unit_geometries(before)?.into_iter().map(|(i, g)| (i, unit_cost(&g))).collect();
    Ok(before
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let total = l.out_units().unwrap_or(0);
            FlopAuditRow {
                layer_index: i,
                kind: l.spec().kind().to_string(),
                units_total: total,
                units_kept: masks.get(i).map(|m| m.kept()).unwrap_or(total),
                unit_cost: costs.get(&i).copied().unwrap_or(0.0),
                layer_flops_before: fb.per_layer[i],
                layer_flops_after: fa.per_layer[i],
            }
        })
        .collect())
}

pub fn write_flop_audit_csv(rows: &[FlopAuditRow], path: &std::path::Path) -> Result<()> {
    let mut out = String::from("layer_index,kind,units_total,units_kept,unit_cost,layer_flops_before,layer_flops_after\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.layer_index, r.kind, r.units_total, r.units_kept, r.unit_cost, r.layer_flops_before, r.layer_flops_after
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
