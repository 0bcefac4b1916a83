//! SGD training, evaluation and epoch timing.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataio::{augment, epoch_batches, Dataset};
use crate::diffcore::{Mode, Real, Tensor};
use crate::error::{Error, Result};
use crate::netgraph::{ForwardOptions, ForwardPass, ModelGraph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Random flips and padded crops on the train split.
    pub augment: bool,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            lr: 0.1,
            milestones: vec![10, 15],
            lr_decay: 0.5,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 128,
            seed: 0,
            augment: true,
            eval_batch_size: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::invalid("batch sizes must be positive"));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!("milestones {:?} must be strictly increasing", self.milestones)));
        }
        if self.milestones.last().is_some_and(|&m| m >= self.epochs) {
            return Err(Error::invalid(format!("milestones {:?} must be below {} epochs", self.milestones, self.epochs)));
        }
        Ok(())
    }

    /// `lr₀ · decay^{#milestones ≤ epoch}` (epochs count from 0).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(self.milestones.iter().filter(|&&m| m <= epoch).count() as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_acc: Option<f64>,
    pub epoch_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: Vec<EpochMetrics>,
    pub final_test_acc: Option<f64>,
}

/// Momentum SGD state (one velocity buffer per parameter tensor).
pub struct Sgd<T> {
    velocity: Vec<Vec<T>>,
    momentum: T,
    weight_decay: T,
}

impl<T: Real> Sgd<T> {
    pub fn new(model: &ModelGraph<T>, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            velocity: model.params().iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            momentum: T::lit(momentum),
            weight_decay: T::lit(weight_decay),
        }
    }

    /// `v ← μv + g + λw`, `w ← w − lr·v`.
    pub fn step(&mut self, model: &mut ModelGraph<T>, grads: &[Tensor<T>], lr: f64) {
        let lr = T::lit(lr);
        for ((p, g), v) in model.params_mut().into_iter().zip(grads).zip(&mut self.velocity) {
            for ((w, &g), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *v = self.momentum * *v + g + self.weight_decay * *w;
                *w -= lr * *v;
            }
        }
    }
}

/// One optimization step on a batch; returns the batch loss.
pub fn train_step<T: Real>(model: &mut ModelGraph<T>, opt: &mut Sgd<T>, images: &Tensor<T>, labels: &[usize], lr: f64) -> Result<f64> {
    let mut pass = ForwardPass::run(model, images, ForwardOptions::train())?;
    let loss = pass.loss(labels, T::one())?;
    let value = pass.graph.value(loss).item().as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    pass.backward(loss)?;
    let grads = pass.param_grads();
    opt.step(model, &grads, lr);
    model.apply_bn_stats(&pass.bn_stats);
    Ok(value)
}

fn run_epoch<T: Real>(model: &mut ModelGraph<T>, opt: &mut Sgd<T>, data: &Dataset, cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    let lr = cfg.lr_at(epoch);
    let mut total = 0.0;
    let mut count = 0usize;
    for idx in epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch) {
        // a single example gives train-mode batch norm nothing to normalize
        if idx.len() < 2 {
            continue;
        }
        let mut batch = data.gather::<T>(&idx);
        if cfg.augment {
            batch = augment(&batch, &idx, cfg.seed, epoch);
        }
        let loss = train_step(model, opt, &batch.images, &batch.labels, lr).map_err(|e| match e {
            Error::NonFinite(_) => Error::Divergence { epoch },
            e => e,
        })?;
        total += loss * idx.len() as f64;
        count += idx.len();
    }
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(total / count as f64)
}

/// Trains `model` in place. Evaluates on `test` after every epoch when given.
pub fn train<T: Real>(model: &mut ModelGraph<T>, data: &Dataset, test: Option<&Dataset>, cfg: &TrainConfig) -> Result<RunMetrics> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.image_shape() != model.input_shape {
        return Err(Error::shape(format!("data images {:?} do not fit model input {:?}", data.image_shape(), model.input_shape)));
    }
    let mut opt = Sgd::new(model, cfg.momentum, cfg.weight_decay);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let train_loss = run_epoch(model, &mut opt, data, cfg, epoch)?;
        let epoch_seconds = t0.elapsed().as_secs_f64();
        let test_acc = test.map(|t| evaluate(model, t, cfg.eval_batch_size)).transpose()?;
        log::info!("epoch {epoch}: loss {train_loss:.4} acc {test_acc:?} ({epoch_seconds:.2}s)");
        epochs.push(EpochMetrics { epoch, lr: cfg.lr_at(epoch), train_loss, test_acc, epoch_seconds });
    }
    Ok(RunMetrics {
        seed: cfg.seed,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        final_test_acc: epochs.last().and_then(|e| e.test_acc),
        epochs,
    })
}

/// Index of the largest entry of each row (ties go to the lowest class).
pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| row.iter().enumerate().fold(0, |best, (j, &v)| if v > row[best] { j } else { best }))
        .collect()
}

/// Top-1 accuracy in eval mode.
pub fn evaluate<T: Real>(model: &ModelGraph<T>, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let b = data.gather::<T>(chunk);
        let pred = argmax_rows(&model.predict(&b.images)?);
        correct += pred.iter().zip(&b.labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Mean wall-time of `measured` training epochs after `warmup` discarded ones.
/// Trains a copy; `model` is untouched.
pub fn time_epoch<T: Real>(model: &ModelGraph<T>, data: &Dataset, cfg: &TrainConfig, warmup: usize, measured: usize) -> Result<f64> {
    if measured == 0 {
        return Err(Error::invalid("need at least one measured epoch"));
    }
    if data.len() < 2 {
        return Err(Error::EmptyDataset);
    }
    let mut m = model.clone();
    let mut opt = Sgd::new(&m, cfg.momentum, cfg.weight_decay);
    let mut total = 0.0;
    for epoch in 0..warmup + measured {
        let t0 = Instant::now();
        run_epoch(&mut m, &mut opt, data, cfg, epoch)?;
        if epoch >= warmup {
            total += t0.elapsed().as_secs_f64();
        }
    }
    Ok(total / measured as f64)
}

/// Mean and standard error (`sd/√n`, sample sd) of per-seed results.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub n: usize,
    pub mean: f64,
    pub se: f64,
}

pub fn mean_se(values: &[f64]) -> MeanSe {
    let n = values.len();
    if n == 0 {
        return MeanSe { n, mean: f64::NAN, se: f64::NAN };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let se = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() / (n as f64).sqrt()
    } else {
        0.0
    };
    MeanSe { n, mean, se }
}

/// `epoch,train_loss,test_acc,epoch_seconds`
pub fn write_metrics_csv(m: &RunMetrics, path: &Path) -> Result<()> {
    let mut out = String::from("epoch,train_loss,test_acc,epoch_seconds\n");
    for e in &m.epochs {
        let acc = e.test_acc.map(|a| a.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, acc, e.epoch_seconds));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loss of `model` on one batch in train mode without touching parameters.
pub fn batch_loss<T: Real>(model: &ModelGraph<T>, images: &Tensor<T>, labels: &[usize], mode: Mode) -> Result<f64> {
    let opts = ForwardOptions { mode, ..ForwardOptions::eval() };
    Ok(model.loss(images, labels, opts)?.as_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{synthetic, Split, SyntheticSpec};
    use crate::netgraph::{he_init, LayerSpec};

    fn mlp() -> ModelGraph<f32> {
        let specs = [
            LayerSpec::Flatten,
            LayerSpec::Linear { in_features: 4, out_features: 8, prunable: true },
            LayerSpec::Relu,
            LayerSpec::Linear { in_features: 8, out_features: 2, prunable: false },
        ];
        let mut m = ModelGraph::from_specs([1, 2, 2], &specs).unwrap();
        he_init(&mut m, 1);
        m
    }

    fn blobs() -> Dataset {
        let spec = SyntheticSpec { classes: 2, channels: 1, size: 2, margin: 4.0, max_shift: 0, ..SyntheticSpec::default() };
        synthetic(&spec, 200, 4, 1).unwrap()
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig { epochs, milestones: vec![], batch_size: 20, augment: false, lr: 0.05, ..TrainConfig::default() }
    }

    #[test]
    fn separable_blobs_are_learned() {
        let data = blobs();
        let mut m = mlp();
        let metrics = train(&mut m, &data, Some(&data), &cfg(50)).unwrap();
        assert!(metrics.final_test_acc.unwrap() > 0.99, "{metrics:?}");
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let data = blobs();
        let mut m = mlp();
        let before = m.clone();
        train(&mut m, &data, None, &TrainConfig { lr: 0.0, ..cfg(3) }).unwrap();
        assert_eq!(m.params(), before.params());
    }

    #[test]
    fn same_seed_same_result() {
        let data = blobs();
        let (mut a, mut b) = (mlp(), mlp());
        let ma = train(&mut a, &data, Some(&data), &cfg(4)).unwrap();
        let mb = train(&mut b, &data, Some(&data), &cfg(4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma.final_test_acc, mb.final_test_acc);
    }

    #[test]
    fn schedule_and_validation() {
        let c = TrainConfig { lr: 0.1, milestones: vec![10, 15], epochs: 20, ..TrainConfig::default() };
        assert_eq!((c.lr_at(9), c.lr_at(10), c.lr_at(15)), (0.1, 0.05, 0.025));
        assert!(TrainConfig { milestones: vec![5, 5], ..c.clone() }.validate().is_err());
        assert!(TrainConfig { milestones: vec![20], ..c.clone() }.validate().is_err());
    }

    #[test]
    fn constant_logits_pick_class_zero() {
        let spec = SyntheticSpec { classes: 10, channels: 1, size: 2, margin: 1.0, max_shift: 0, ..SyntheticSpec::default() };
        let data = synthetic(&spec, 100, 0, 0).unwrap();
        let specs = [LayerSpec::Flatten, LayerSpec::Linear { in_features: 4, out_features: 10, prunable: false }];
        let m = ModelGraph::<f32>::from_specs([1, 2, 2], &specs).unwrap();
        assert_eq!(evaluate(&m, &data, 7).unwrap(), 0.1);
        let empty = data.subset(&[], Split::Test);
        assert!(matches!(evaluate(&m, &empty, 7), Err(Error::EmptyDataset)));
        assert!(time_epoch(&m, &empty, &cfg(1), 1, 1).is_err());
    }

    #[test]
    fn divergence_reports_epoch() {
        let data = blobs();
        let mut m = mlp();
        let r = train(&mut m, &data, None, &TrainConfig { lr: 1e30, momentum: 0.0, ..cfg(5) });
        assert!(matches!(r, Err(Error::Divergence { .. })), "{r:?}");
    }

    #[test]
    fn mean_and_standard_error() {
        let s = mean_se(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!((s.n, s.mean), (5, 3.0));
        assert!((s.se - (2.5f64).sqrt() / 5f64.sqrt()).abs() < 1e-12);
    }
}
