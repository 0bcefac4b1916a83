use super::kernels::{self, ConvGeom};
use super::{Real, Tensor};
use crate::error::{Error, Result};

pub type NodeId = usize;

/// Batch-norm behaviour for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Normalize with batch statistics and report them for running-stat updates.
    Train,
    /// Normalize with running statistics.
    Eval,
}

/// Statistics a train-mode batch norm observed; the caller folds them into
/// its running estimates.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance (count / (count − 1) correction applied).
    pub var_unbiased: Vec<T>,
}

/// Per-graph instrumentation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    /// Multiply-accumulates performed by conv and linear forwards, whole batch.
    pub macs: u64,
    /// Number of model-level forward passes recorded via [`Graph::mark_forward`].
    pub forward_passes: u32,
    pub backward_passes: u32,
    /// Largest batch extent seen by a forward pass.
    pub max_batch: usize,
}

enum Op<T> {
    Leaf,
    Conv2d { input: NodeId, kernel: NodeId, bias: Option<NodeId>, geom: ConvGeom },
    Linear { input: NodeId, weight: NodeId, bias: Option<NodeId> },
    BatchNorm { input: NodeId, gamma: NodeId, beta: NodeId, xhat: Tensor<T>, inv_std: Vec<T>, train: bool },
    Relu { input: NodeId },
    MaxPool2 { input: NodeId, argmax: Vec<u32> },
    AvgPool { input: NodeId },
    Reshape { input: NodeId },
    ChannelScale { input: NodeId, scale: NodeId },
    Mul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sum { input: NodeId },
    Scale { input: NodeId, factor: T },
    SoftmaxCe { logits: NodeId, probs: Tensor<T>, labels: Vec<usize>, temperature: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so every
/// node's inputs have smaller ids and reverse id order is a valid
/// topological order.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Tensor<T>>>,
    counters: Counters,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), leaf_grads: Vec::new(), counters: Counters::default() }
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    /// Records that a full model forward pass was evaluated on `batch` examples.
    pub fn mark_forward(&mut self, batch: usize) {
        self.counters.forward_passes += 1;
        self.counters.max_batch = self.counters.max_batch.max(batch);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        self.leaf_grads.push(None);
        self.nodes.len() - 1
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    /// Differentiable leaf (parameter, mask variable).
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf (data).
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    /// Accumulated gradient of a leaf; `None` if no backward reached it.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.leaf_grads[id].as_ref()
    }

    /// Gradient of a leaf, zero-filled when backward never reached it.
    pub fn grad_or_zero(&self, id: NodeId) -> Tensor<T> {
        self.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(self.value(id).shape()))
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: Option<NodeId>, padding: usize, stride: usize) -> Result<NodeId> {
        let (out, geom) = kernels::conv2d_forward(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            padding,
            stride,
        )?;
        self.counters.macs += geom.macs();
        let rg = self.rg(input) || self.rg(kernel) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv2d { input, kernel, bias, geom }, rg))
    }

    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let out = kernels::linear_forward(self.value(input), self.value(weight), bias.map(|b| self.value(b)))?;
        let (n, f) = (self.value(input).shape()[0], self.value(input).shape()[1]);
        self.counters.macs += (n * f * self.value(weight).shape()[0]) as u64;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Linear { input, weight, bias }, rg))
    }

    /// Batch normalization over dim 1 of an NCHW or NC tensor.
    ///
    /// In train mode returns the observed batch statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[T],
        running_var: &[T],
        mode: Mode,
        eps: T,
    ) -> Result<(NodeId, Option<BatchStats<T>>)> {
        let x = self.value(input);
        if x.shape().len() < 2 {
            return Err(Error::shape(format!("batch norm input must be at least 2-d, got {:?}", x.shape())));
        }
        let c = x.shape()[1];
        for (what, len) in [
            ("gamma", self.value(gamma).numel()),
            ("beta", self.value(beta).numel()),
            ("running mean", running_mean.len()),
            ("running var", running_var.len()),
        ] {
            if len != c {
                return Err(Error::shape(format!("batch norm {what} has {len} entries for {c} channels")));
            }
        }
        let inner: usize = x.shape()[2..].iter().product();
        let count = x.shape()[0] * inner;
        let (mean, var, stats) = match mode {
            Mode::Train => {
                if count < 2 {
                    return Err(Error::DegenerateBatch(count));
                }
                let (m, v) = kernels::channel_moments(x);
                let corr = T::lit(count as f64 / (count as f64 - 1.0));
                let stats = BatchStats { mean: m.clone(), var_unbiased: v.iter().map(|&v| v * corr).collect() };
                (m, v, Some(stats))
            }
            Mode::Eval => (running_mean.to_vec(), running_var.to_vec(), None),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        for (i, &e) in x.data().iter().enumerate() {
            let ch = (i / inner) % c;
            let h = (e - mean[ch]) * inv_std[ch];
            xhat.data_mut()[i] = h;
            y.data_mut()[i] = gv[ch] * h + bv[ch];
        }
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        let id = self.push(y, Op::BatchNorm { input, gamma, beta, xhat, inv_std, train: mode == Mode::Train }, rg);
        Ok((id, stats))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let y = self.value(input).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(input);
        self.push(y, Op::Relu { input }, rg)
    }

    pub fn maxpool2(&mut self, input: NodeId) -> Result<NodeId> {
        let (y, argmax) = kernels::maxpool2_forward(self.value(input))?;
        let rg = self.rg(input);
        Ok(self.push(y, Op::MaxPool2 { input, argmax }, rg))
    }

    /// Adaptive average pooling to `out_h × out_w`.
    pub fn avgpool(&mut self, input: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let y = kernels::avgpool_forward(self.value(input), out_h, out_w)?;
        let rg = self.rg(input);
        Ok(self.push(y, Op::AvgPool { input }, rg))
    }

    /// Collapses all dimensions after the first.
    pub fn flatten(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let n = x.shape()[0];
        let rest: usize = x.shape()[1..].iter().product();
        let y = x.clone().reshape(&[n, rest]).expect("flatten preserves size");
        let rg = self.rg(input);
        self.push(y, Op::Reshape { input }, rg)
    }

    /// `y[n, c, ...] = x[n, c, ...] · scale[c]`.
    pub fn channel_scale(&mut self, input: NodeId, scale: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let s = self.value(scale);
        if x.shape().len() < 2 || s.numel() != x.shape()[1] {
            return Err(Error::shape(format!("channel scale of {} entries for input {:?}", s.numel(), x.shape())));
        }
        let c = x.shape()[1];
        let inner: usize = x.shape()[2..].iter().product();
        let mut y = x.clone();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v *= s.data()[(i / inner) % c];
        }
        let rg = self.rg(input) || self.rg(scale);
        Ok(self.push(y, Op::ChannelScale { input, scale }, rg))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape(format!("mul {:?} by {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape(format!("add {:?} to {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let s = self.value(input).sum();
        let rg = self.rg(input);
        self.push(Tensor::scalar(s), Op::Sum { input }, rg)
    }

    pub fn scale(&mut self, input: NodeId, factor: T) -> NodeId {
        let y = self.value(input).map(|v| v * factor);
        let rg = self.rg(input);
        self.push(y, Op::Scale { input, factor }, rg)
    }

    /// Mean softmax cross-entropy of `logits / temperature`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize], temperature: T) -> Result<NodeId> {
        if !(temperature > T::zero()) {
            return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
        }
        let z = self.value(logits);
        let &[n, c] = z.shape() else {
            return Err(Error::shape(format!("logits must be 2-d, got {:?}", z.shape())));
        };
        if labels.len() != n {
            return Err(Error::shape(format!("{} labels for {} rows", labels.len(), n)));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
        }
        if !z.is_finite() {
            return Err(Error::NonFinite("logits".into()));
        }
        let mut probs = Tensor::zeros(&[n, c]);
        let mut loss = T::zero();
        for (r, row) in z.data().chunks(c).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let scaled: Vec<T> = row.iter().map(|&v| (v - max) / temperature).collect();
            let lse = scaled.iter().map(|&v| v.exp()).sum::<T>().ln();
            for (j, &s) in scaled.iter().enumerate() {
                probs.data_mut()[r * c + j] = (s - lse).exp();
            }
            loss += lse - scaled[labels[r]];
        }
        let loss = loss / T::lit(n as f64);
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxCe { logits, probs, labels: labels.to_vec(), temperature }, rg))
    }

    /// Back-propagates from a scalar node, adding into leaf accumulators.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::Backward(format!("root must be scalar, has shape {:?}", self.value(root).shape())));
        }
        self.counters.backward_passes += 1;
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(Tensor::ones(self.value(root).shape()));
        for id in (0..=root).rev() {
            let Some(dy) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            for (target, g) in self.local_grads(id, &dy) {
                debug_assert!(target < id, "tape order violated");
                match &mut grads[target] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                match &mut self.leaf_grads[id] {
                    Some(acc) => acc.add_assign(&dy),
                    slot @ None => *slot = Some(dy),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `id` for each input that needs one.
    fn local_grads(&self, id: NodeId, dy: &Tensor<T>) -> Vec<(NodeId, Tensor<T>)> {
        let mut out = Vec::new();
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, geom } => {
                let grads = kernels::conv2d_backward(geom, self.value(*input), self.value(*kernel), dy, self.rg(*input));
                if let Some(dx) = grads.dx {
                    out.push((*input, dx));
                }
                if self.rg(*kernel) {
                    out.push((*kernel, grads.dkernel));
                }
                if let Some(b) = bias.filter(|&b| self.rg(b)) {
                    out.push((b, grads.dbias));
                }
            }
            Op::Linear { input, weight, bias } => {
                let (dx, dw, db) =
                    kernels::linear_backward(self.value(*input), self.value(*weight), dy, self.rg(*input));
                if let Some(dx) = dx {
                    out.push((*input, dx));
                }
                if self.rg(*weight) {
                    out.push((*weight, dw));
                }
                if let Some(b) = bias.filter(|&b| self.rg(b)) {
                    out.push((b, db));
                }
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, train } => {
                let c = xhat.shape()[1];
                let inner: usize = xhat.shape()[2..].iter().product();
                let count = T::lit((xhat.shape()[0] * inner) as f64);
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (i, (&d, &h)) in dy.data().iter().zip(xhat.data()).enumerate() {
                    let ch = (i / inner) % c;
                    dgamma[ch] += d * h;
                    dbeta[ch] += d;
                }
                if self.rg(*input) {
                    let mut dx = Tensor::zeros(xhat.shape());
                    for (i, v) in dx.data_mut().iter_mut().enumerate() {
                        let ch = (i / inner) % c;
                        let dxhat = dy.data()[i] * gv[ch];
                        *v = if *train {
                            // dxhat sums are γ·dβ and γ·dγ per channel
                            inv_std[ch] / count
                                * (count * dxhat - gv[ch] * dbeta[ch] - xhat.data()[i] * gv[ch] * dgamma[ch])
                        } else {
                            dxhat * inv_std[ch]
                        };
                    }
                    out.push((*input, dx));
                }
                if self.rg(*gamma) {
                    out.push((*gamma, Tensor::new(vec![c], dgamma).expect("gamma grad")));
                }
                if self.rg(*beta) {
                    out.push((*beta, Tensor::new(vec![c], dbeta).expect("beta grad")));
                }
            }
            Op::Relu { input } => {
                let x = self.value(*input);
                let data = x.data().iter().zip(dy.data()).map(|(&v, &d)| if v > T::zero() { d } else { T::zero() });
                out.push((*input, Tensor::new(x.shape().to_vec(), data.collect()).expect("relu grad")));
            }
            Op::MaxPool2 { input, argmax } => {
                let mut dx = Tensor::zeros(self.value(*input).shape());
                for (&a, &d) in argmax.iter().zip(dy.data()) {
                    dx.data_mut()[a as usize] += d;
                }
                out.push((*input, dx));
            }
            Op::AvgPool { input } => {
                out.push((*input, kernels::avgpool_backward(self.value(*input).shape(), dy)));
            }
            Op::Reshape { input } => {
                out.push((*input, dy.clone().reshape(self.value(*input).shape()).expect("reshape grad")));
            }
            Op::ChannelScale { input, scale } => {
                let x = self.value(*input);
                let s = self.value(*scale);
                let c = x.shape()[1];
                let inner: usize = x.shape()[2..].iter().product();
                if self.rg(*input) {
                    let mut dx = dy.clone();
                    for (i, v) in dx.data_mut().iter_mut().enumerate() {
                        *v *= s.data()[(i / inner) % c];
                    }
                    out.push((*input, dx));
                }
                if self.rg(*scale) {
                    let mut ds = vec![T::zero(); c];
                    for (i, (&d, &v)) in dy.data().iter().zip(x.data()).enumerate() {
                        ds[(i / inner) % c] += d * v;
                    }
                    out.push((*scale, Tensor::new(s.shape().to_vec(), ds).expect("scale grad")));
                }
            }
            Op::Mul { a, b } => {
                let (x, y) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = dy.data().iter().zip(y.data()).map(|(&g, &v)| g * v).collect();
                    out.push((*a, Tensor::new(x.shape().to_vec(), d).expect("mul grad")));
                }
                if self.rg(*b) {
                    let d = dy.data().iter().zip(x.data()).map(|(&g, &v)| g * v).collect();
                    out.push((*b, Tensor::new(y.shape().to_vec(), d).expect("mul grad")));
                }
            }
            Op::Add { a, b } => {
                for t in [*a, *b] {
                    if self.rg(t) {
                        out.push((t, dy.clone()));
                    }
                }
            }
            Op::Sum { input } => {
                out.push((*input, Tensor::full(self.value(*input).shape(), dy.item())));
            }
            Op::Scale { input, factor } => {
                out.push((*input, dy.map(|v| v * *factor)));
            }
            Op::SoftmaxCe { logits, probs, labels, temperature } => {
                let c = probs.shape()[1];
                let n = probs.shape()[0];
                let k = dy.item() / (T::lit(n as f64) * *temperature);
                let mut dz = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    dz.data_mut()[r * c + l] -= T::one();
                }
                dz.data_mut().iter_mut().for_each(|v| *v *= k);
                out.push((*logits, dz));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_gradient_is_other_factor() {
        let mut g = Graph::<f64>::new();
        let m = g.param(Tensor::scalar(1.0));
        let a = g.param(Tensor::scalar(3.0));
        let l = g.mul(m, a).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(m).unwrap().item(), 3.0);
        assert_eq!(g.grad(a).unwrap().item(), 1.0);
    }

    #[test]
    fn disconnected_leaf_has_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let unused = g.param(Tensor::from_f64(&[2], &[5.0, 6.0]).unwrap());
        let s = g.sum(a);
        g.backward(s).unwrap();
        assert!(g.grad(unused).is_none());
        assert_eq!(g.grad_or_zero(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::scalar(2.0));
        let l = g.scale(a, 4.0);
        g.backward(l).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap().item(), 8.0);
        g.zero_grad();
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap().item(), 4.0);
        assert_eq!(g.counters().backward_passes, 3);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::zeros(&[3]));
        assert!(matches!(g.backward(a), Err(Error::Backward(_))));
    }

    #[test]
    fn linear_trivial_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[1, 2], &[1.0, 1.0]).unwrap());
        let w = g.param(Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap());
        let b = g.param(Tensor::zeros(&[1]));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[3.0]);

        let x = g.constant(Tensor::from_f64(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap());
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 4] = 1.0;
        }
        let w = g.param(eye);
        let b = g.param(Tensor::zeros(&[3]));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let bad = g.param(Tensor::zeros(&[3, 4]));
        assert!(g.linear(x, bad, None).is_err());
    }

    #[test]
    fn relu_and_maxpool_values() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::from_f64(&[2], &[-1.0, 2.0]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);

        let p = g.param(Tensor::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let m = g.maxpool2(p).unwrap();
        assert_eq!(g.value(m).data(), &[4.0]);
        let s = g.sum(m);
        g.backward(s).unwrap();
        assert_eq!(g.grad(p).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn cross_entropy_values() {
        let mut g = Graph::<f64>::new();
        let z = g.param(Tensor::zeros(&[3, 10]));
        let l = g.softmax_cross_entropy(z, &[0, 4, 9], 1.0).unwrap();
        assert!((g.value(l).item() - 10f64.ln()).abs() < 1e-12);

        let mut onehot = Tensor::zeros(&[1, 10]);
        onehot.data_mut()[3] = 1e6;
        let z = g.param(onehot);
        let l = g.softmax_cross_entropy(z, &[3], 1.0).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);

        let bad = g.param(Tensor::from_f64(&[1, 2], &[f64::NAN, 0.0]).unwrap());
        assert!(matches!(g.softmax_cross_entropy(bad, &[0], 1.0), Err(Error::NonFinite(_))));
        assert!(g.softmax_cross_entropy(z, &[10], 1.0).is_err());
        assert!(g.softmax_cross_entropy(z, &[0], 0.0).is_err());
    }

    #[test]
    fn batch_norm_train_normalizes() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| ((i * 37) % 11) as f64 * 0.3 - 1.0).collect();
        let x = g.param(Tensor::from_f64(&[2, 3, 4, 4], &data).unwrap());
        let gamma = g.param(Tensor::ones(&[3]));
        let beta = g.param(Tensor::zeros(&[3]));
        let (y, stats) = g.batch_norm(x, gamma, beta, &[0.0; 3], &[1.0; 3], Mode::Train, 1e-5).unwrap();
        assert!(stats.is_some());
        let (mean, var) = kernels::channel_moments(g.value(y));
        for c in 0..3 {
            assert!(mean[c].abs() < 1e-4);
            assert!((var[c] - 1.0).abs() < 1e-4);
        }

        let gamma0 = g.param(Tensor::zeros(&[3]));
        let betac = g.param(Tensor::full(&[3], 0.7));
        let (y, _) = g.batch_norm(x, gamma0, betac, &[0.0; 3], &[1.0; 3], Mode::Train, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.7));

        let single = g.param(Tensor::zeros(&[1, 3, 1, 1]));
        assert!(matches!(
            g.batch_norm(single, gamma, beta, &[0.0; 3], &[1.0; 3], Mode::Train, 1e-5),
            Err(Error::DegenerateBatch(1))
        ));
        assert!(g.batch_norm(single, gamma, beta, &[0.0; 3], &[1.0; 3], Mode::Eval, 1e-5).is_ok());
    }
}
