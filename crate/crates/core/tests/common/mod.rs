//! Helpers shared by the integration suites: finite-difference checks of every
//! graph op and random small networks with random masks.

#![allow(dead_code)]

use chanprune::diffcore::{Graph, Mode, NodeId, Tensor};
use chanprune::netgraph::{he_init, Layer, LayerSpec, MaskSet, ModelGraph, UnitMask, BN_EPS, BN_MOMENTUM};
use chanprune::oracle::gradcheck::check_tensor;
use chanprune::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_FLOOR: f64 = 1e-6;

pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Worst relative error over all inputs of `op`, reduced to a scalar by a
/// fixed random projection of its output.
pub fn check_op(inputs: &[Tensor<f64>], seed: u64, op: impl Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>) -> f64 {
    let scalar = |xs: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<NodeId>, NodeId)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = xs.iter().map(|x| g.param(x.clone())).collect();
        let out = op(&mut g, &ids)?;
        let shape = g.value(out).shape().to_vec();
        let r = g.constant(uniform(&shape, &mut ChaCha8Rng::seed_from_u64(seed)));
        let prod = g.mul(out, r)?;
        let l = g.sum(prod);
        Ok((g, ids, l))
    };
    let (mut g, ids, l) = scalar(inputs).unwrap();
    g.backward(l).unwrap();
    let mut worst = 0.0f64;
    for (k, &id) in ids.iter().enumerate() {
        let analytic = g.grad_or_zero(id);
        let err = check_tensor(&inputs[k], &analytic, FD_FLOOR, |probe| {
            let mut xs = inputs.to_vec();
            xs[k] = probe.clone();
            let (g, _, l) = scalar(&xs)?;
            Ok(g.value(l).item())
        })
        .unwrap();
        worst = worst.max(err);
    }
    worst
}

/// `(op, worst relative error)` for every differentiable graph op.
pub fn op_gradchecks() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut out = Vec::new();
    let x = uniform(&[2, 3, 6, 6], &mut rng);
    let k = uniform(&[4, 3, 3, 3], &mut rng);
    let b = uniform(&[4], &mut rng);
    out.push(("conv2d", check_op(&[x.clone(), k.clone(), b.clone()], 1, |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1))));
    let x7 = uniform(&[2, 3, 7, 7], &mut rng);
    out.push(("conv2d stride 2", check_op(&[x7, k.clone()], 2, |g, v| g.conv2d(v[0], v[1], None, 1, 2))));
    let xl = uniform(&[3, 5], &mut rng);
    let wl = uniform(&[4, 5], &mut rng);
    out.push(("linear", check_op(&[xl.clone(), wl, b.clone()], 3, |g, v| g.linear(v[0], v[1], Some(v[2])))));
    let gamma = uniform(&[3], &mut rng).map(|v| v + 1.5);
    let beta = uniform(&[3], &mut rng);
    let (rm, rv) = (vec![0.1, -0.2, 0.3], vec![0.5, 1.5, 2.0]);
    for (name, mode) in [("batch_norm train", Mode::Train), ("batch_norm eval", Mode::Eval)] {
        let (rm, rv) = (rm.clone(), rv.clone());
        out.push((name, check_op(&[x.clone(), gamma.clone(), beta.clone()], 4, move |g, v| Ok(g.batch_norm(v[0], v[1], v[2], &rm, &rv, mode, BN_EPS)?.0))));
    }
    out.push(("relu", check_op(std::slice::from_ref(&x), 5, |g, v| Ok(g.relu(v[0])))));
    out.push(("maxpool2", check_op(std::slice::from_ref(&x), 6, |g, v| g.maxpool2(v[0]))));
    out.push(("avgpool", check_op(std::slice::from_ref(&x), 7, |g, v| g.avgpool(v[0], 2, 2))));
    out.push(("flatten", check_op(std::slice::from_ref(&x), 8, |g, v| Ok(g.flatten(v[0])))));
    let s = uniform(&[3], &mut rng);
    out.push(("channel_scale", check_op(&[x.clone(), s], 9, |g, v| g.channel_scale(v[0], v[1]))));
    let y = uniform(&[2, 3, 6, 6], &mut rng);
    out.push(("mul", check_op(&[x.clone(), y.clone()], 10, |g, v| g.mul(v[0], v[1]))));
    out.push(("add", check_op(&[x.clone(), y], 11, |g, v| g.add(v[0], v[1]))));
    out.push(("sum", check_op(std::slice::from_ref(&x), 12, |g, v| Ok(g.sum(v[0])))));
    out.push(("scale", check_op(std::slice::from_ref(&x), 13, |g, v| Ok(g.scale(v[0], -2.5)))));
    let logits = uniform(&[4, 5], &mut rng).map(|v| 3.0 * v);
    for (name, t) in [("cross_entropy", 1.0), ("cross_entropy T=0.4", 0.4)] {
        out.push((name, check_op(std::slice::from_ref(&logits), 14, move |g, v| g.softmax_cross_entropy(v[0], &[0, 3, 1, 4], t))));
    }
    out
}

fn conv(cin: usize, cout: usize) -> LayerSpec {
    LayerSpec::Conv { in_channels: cin, out_channels: cout, kernel: 3, padding: 1, stride: 1, prunable: true }
}

fn bn(c: usize) -> LayerSpec {
    LayerSpec::Bn { channels: c, eps: BN_EPS, momentum: BN_MOMENTUM }
}

/// Random small conv net: 1-3 conv blocks (optionally with BN), pooling,
/// 0-2 hidden linear layers and a classifier.
pub fn random_net(rng: &mut ChaCha8Rng, with_bn: bool) -> ModelGraph<f64> {
    let cin = rng.random_range(1..=3);
    let size = [4usize, 8][rng.random_range(0..2)];
    let mut specs = Vec::new();
    let mut ch = cin;
    let mut side = size;
    for b in 0..rng.random_range(1..=3) {
        if b > 0 && side >= 4 {
            specs.push(LayerSpec::MaxPool);
            side /= 2;
        }
        let w = rng.random_range(2..=6);
        specs.push(conv(ch, w));
        if with_bn {
            specs.push(bn(w));
        }
        specs.push(LayerSpec::Relu);
        ch = w;
    }
    let pool = rng.random_range(1..=side.min(2));
    specs.push(LayerSpec::AvgPool { out_h: pool, out_w: pool });
    specs.push(LayerSpec::Flatten);
    let mut feat = ch * pool * pool;
    for _ in 0..rng.random_range(0..=2) {
        let h = rng.random_range(2..=7);
        specs.push(LayerSpec::Linear { in_features: feat, out_features: h, prunable: true });
        specs.push(LayerSpec::Relu);
        feat = h;
    }
    specs.push(LayerSpec::Linear { in_features: feat, out_features: 3, prunable: false });
    let mut m = ModelGraph::from_specs([cin, size, size], &specs).unwrap();
    he_init(&mut m, rng.random());
    randomize_affine(&mut m, rng);
    m
}

/// Non-trivial biases, BN affine parameters and running statistics.
pub fn randomize_affine(m: &mut ModelGraph<f64>, rng: &mut ChaCha8Rng) {
    for layer in &mut m.layers {
        match layer {
            Layer::Conv(c) => c.bias.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3)),
            Layer::Linear(l) => l.bias.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3)),
            Layer::BatchNorm(b) => {
                b.gamma.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
                b.beta.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
                b.running_mean.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
                b.running_var.iter_mut().for_each(|v| *v = rng.random_range(0.5..2.0));
            }
            _ => {}
        }
    }
}

/// Random keep-mask with at least one survivor per layer.
pub fn random_mask<T: chanprune::diffcore::Real>(m: &ModelGraph<T>, rng: &mut ChaCha8Rng) -> MaskSet {
    let entries = m
        .prunable_layers()
        .into_iter()
        .map(|layer| {
            let n = m.layers[layer].out_units().unwrap();
            let p = rng.random_range(0.2..0.9);
            let mut keep: Vec<bool> = (0..n).map(|_| rng.random_bool(p)).collect();
            if !keep.contains(&true) {
                keep[rng.random_range(0..n)] = true;
            }
            UnitMask { layer, keep }
        })
        .collect();
    MaskSet { entries }
}
