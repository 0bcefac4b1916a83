use super::{Layer, ModelGraph};
use crate::diffcore::{BatchStats, Graph, Mode, NodeId, Real, Tensor};
use crate::error::{Error, Result};

/// Mask variables attached to a forward pass.
#[derive(Clone, Debug, Default)]
pub enum MaskInput<T> {
    /// Plain forward, no mask nodes.
    #[default]
    None,
    /// One value per unit of each prunable layer, in layer order. Attached
    /// as differentiable leaves.
    Values(Vec<Vec<T>>),
}

impl<T: Real> MaskInput<T> {
    pub fn ones<U: Real>(model: &ModelGraph<U>) -> Self {
        MaskInput::Values(
            model.prunable_layers().iter().map(|&i| vec![T::one(); model.layers[i].out_units().unwrap()]).collect(),
        )
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOptions<T> {
    pub mode: Mode,
    pub masks: MaskInput<T>,
    /// Attach parameters as differentiable leaves.
    pub param_grads: bool,
}

impl<T> ForwardOptions<T> {
    pub fn eval() -> Self {
        ForwardOptions { mode: Mode::Eval, masks: MaskInput::None, param_grads: false }
    }

    pub fn train() -> Self {
        ForwardOptions { mode: Mode::Train, masks: MaskInput::None, param_grads: true }
    }
}

/// A recorded forward pass of a [`ModelGraph`] on one batch.
pub struct ForwardPass<T> {
    pub graph: Graph<T>,
    pub logits: NodeId,
    /// Parameter leaves per layer, canonical order within the layer.
    pub param_nodes: Vec<Vec<NodeId>>,
    /// `(layer index, mask leaf)` per prunable layer when masks are attached.
    pub mask_nodes: Vec<(usize, NodeId)>,
    /// Train-mode batch statistics per BN layer.
    pub bn_stats: Vec<(usize, BatchStats<T>)>,
    /// Output node of each layer (after any mask applied there); the input
    /// node for layers before the start layer.
    pub layer_outputs: Vec<NodeId>,
}

impl<T: Real> ForwardPass<T> {
    pub fn run(model: &ModelGraph<T>, batch: &Tensor<T>, opts: ForwardOptions<T>) -> Result<Self> {
        Self::run_from(model, 0, batch, opts)
    }

    /// Runs layers `start..` on `input`, the batched output of layer
    /// `start − 1` (or the model input when `start == 0`). Mask values of
    /// layers before `start` are checked but not applied.
    pub fn run_from(model: &ModelGraph<T>, start: usize, input: &Tensor<T>, opts: ForwardOptions<T>) -> Result<Self> {
        let shape = input.shape();
        let want: Vec<usize> = if start == 0 {
            model.input_shape.to_vec()
        } else {
            model.activation_shapes()?.get(start - 1).cloned().ok_or_else(|| Error::shape(format!("no layer {start}")))?
        };
        if shape.is_empty() || shape[1..] != want[..] {
            return Err(Error::shape(format!("input {shape:?} does not match layer {start} input {want:?}")));
        }
        let prunable = model.prunable_layers();
        let mask_values = match opts.masks {
            MaskInput::None => None,
            MaskInput::Values(v) => {
                if v.len() != prunable.len() {
                    return Err(Error::shape(format!("{} mask vectors for {} prunable layers", v.len(), prunable.len())));
                }
                for (vals, &i) in v.iter().zip(&prunable) {
                    let want = model.layers[i].out_units().unwrap();
                    if vals.len() != want {
                        return Err(Error::shape(format!("mask of length {} for layer {i} with {want} units", vals.len())));
                    }
                }
                Some(v)
            }
        };
        let mut g = Graph::new();
        g.mark_forward(shape[0]);
        let mut cur = g.constant(input.clone());
        let mut param_nodes = Vec::with_capacity(model.layers.len());
        let mut mask_nodes = Vec::new();
        let mut bn_stats = Vec::new();
        let mut layer_outputs = Vec::with_capacity(model.layers.len());
        // mask leaf pending for the layer index at which it is applied
        let mut pending: Option<(usize, NodeId)> = None;
        let mut mask_iter = mask_values.into_iter().flatten();

        for (i, layer) in model.layers.iter().enumerate() {
            if i < start {
                if layer.is_prunable() {
                    mask_iter.next();
                }
                param_nodes.push(Vec::new());
                layer_outputs.push(cur);
                continue;
            }
            let leaves: Vec<NodeId> = layer
                .params()
                .into_iter()
                .map(|t| if opts.param_grads { g.param(t.clone()) } else { g.constant(t.clone()) })
                .collect();
            cur = match layer {
                Layer::Conv(c) => g.conv2d(cur, leaves[0], Some(leaves[1]), c.padding, c.stride)?,
                Layer::Linear(_) => g.linear(cur, leaves[0], Some(leaves[1]))?,
                Layer::BatchNorm(bn) => {
                    let (y, stats) = g.batch_norm(
                        cur,
                        leaves[0],
                        leaves[1],
                        &bn.running_mean,
                        &bn.running_var,
                        opts.mode,
                        T::lit(bn.eps),
                    )?;
                    if let Some(s) = stats {
                        bn_stats.push((i, s));
                    }
                    y
                }
                Layer::Relu => g.relu(cur),
                Layer::MaxPool => g.maxpool2(cur)?,
                Layer::AvgPool { out_h, out_w } => g.avgpool(cur, *out_h, *out_w)?,
                Layer::Flatten => g.flatten(cur),
            };
            if layer.is_prunable() {
                if let Some(vals) = mask_iter.next() {
                    let n = vals.len();
                    let leaf = g.param(Tensor::new(vec![n], vals)?);
                    mask_nodes.push((i, leaf));
                    pending = Some((model.mask_point(i), leaf));
                }
            }
            if let Some((at, leaf)) = pending {
                if at == i {
                    cur = g.channel_scale(cur, leaf)?;
                    pending = None;
                }
            }
            param_nodes.push(leaves);
            layer_outputs.push(cur);
        }
        Ok(ForwardPass { graph: g, logits: cur, param_nodes, mask_nodes, bn_stats, layer_outputs })
    }

    pub fn logits(&self) -> &Tensor<T> {
        self.graph.value(self.logits)
    }

    /// Appends the mean cross-entropy loss node.
    pub fn loss(&mut self, labels: &[usize], temperature: T) -> Result<NodeId> {
        self.graph.softmax_cross_entropy(self.logits, labels, temperature)
    }

    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.graph.backward(loss)
    }

    /// Parameter gradients in the model's canonical parameter order.
    pub fn param_grads(&self) -> Vec<Tensor<T>> {
        self.param_nodes.iter().flatten().map(|&id| self.graph.grad_or_zero(id)).collect()
    }

    /// Gradient with respect to each mask entry, per prunable layer.
    pub fn mask_grads(&self) -> Vec<Vec<T>> {
        self.mask_nodes.iter().map(|&(_, id)| self.graph.grad_or_zero(id).into_data()).collect()
    }
}

impl<T: Real> ModelGraph<T> {
    /// Eval-mode logits without masks.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(ForwardPass::run(self, batch, ForwardOptions::eval())?.logits().clone())
    }

    /// Logits with unit masks applied (no gradients).
    pub fn forward_masked(&self, masks: &super::MaskSet, batch: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        masks.validate(self)?;
        let opts = ForwardOptions { mode, masks: MaskInput::Values(masks.values()), param_grads: false };
        Ok(ForwardPass::run(self, batch, opts)?.logits().clone())
    }

    /// Mean cross-entropy of the model on a batch.
    pub fn loss(&self, batch: &Tensor<T>, labels: &[usize], opts: ForwardOptions<T>) -> Result<T> {
        let mut pass = ForwardPass::run(self, batch, opts)?;
        let l = pass.loss(labels, T::one())?;
        Ok(pass.graph.value(l).item())
    }
}
