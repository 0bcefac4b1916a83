//! Time-budgeted pool-based active learning with entropy acquisition.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, Split};
use crate::diffcore::{Real, Tensor};
use crate::error::{Error, Result};
use crate::netgraph::ModelGraph;
use crate::trainer::{evaluate, train, TrainConfig};

/// Softmax entropy `−Σ p log p` of each row of `logits`.
pub fn entropy_of_logits<T: Real>(logits: &Tensor<T>) -> Vec<f64> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mx = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v.as_f64() - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            let h = -e.iter().map(|&x| x / z).filter(|&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
            h.max(0.0)
        })
        .collect()
}

/// Entropy of the eval-mode predictive distribution for each example.
pub fn entropy_score<T: Real>(model: &ModelGraph<T>, images: &Tensor<T>) -> Result<Vec<f64>> {
    Ok(entropy_of_logits(&model.predict(images)?))
}

/// Positions of the `k` largest scores; ties go to the smaller pool index.
pub fn top_k(scores: &[f64], pool: &[usize], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(pool[a].cmp(&pool[b])));
    order.truncate(k);
    order
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AcquisitionConfig {
    pub budget_seconds: f64,
    pub points_per_step: usize,
    pub initial_per_class: usize,
    /// Training run between acquisitions (continues from the current weights).
    pub round: TrainConfig,
    pub score_batch_size: usize,
    pub seed: u64,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        AcquisitionConfig {
            budget_seconds: 60.0,
            points_per_step: 50,
            initial_per_class: 100,
            round: TrainConfig { epochs: 2, milestones: vec![], lr: 0.05, ..TrainConfig::default() },
            score_batch_size: 500,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    /// Budget time consumed when the model was evaluated.
    pub wall_seconds: f64,
    /// Size of the labeled set the model was trained on.
    pub labeled_count: usize,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionState {
    pub labeled: Vec<usize>,
    pub pool: Vec<usize>,
    /// Budget time consumed (training and scoring; evaluation excluded).
    pub elapsed: f64,
    pub trace: Vec<TracePoint>,
    pub acquisitions: usize,
    pub pool_exhausted: bool,
}

impl AcquisitionState {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.trace.last().map(|t| t.test_accuracy)
    }
}

/// First `per_class` examples of each class after a seeded shuffle.
pub fn initial_split(data: &Dataset, per_class: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut taken = vec![0usize; data.num_classes];
    let (mut labeled, mut pool) = (Vec::new(), Vec::new());
    for i in idx {
        let c = data.labels[i];
        if taken[c] < per_class {
            taken[c] += 1;
            labeled.push(i);
        } else {
            pool.push(i);
        }
    }
    labeled.sort_unstable();
    pool.sort_unstable();
    (labeled, pool)
}

/// Runs `train → evaluate → acquire` rounds until the wall-clock budget runs
/// out. `model` should already be pruned; the clock starts here. A training
/// round or acquisition that overruns the budget is discarded.
pub fn acquisition_loop<T: Real>(model: &mut ModelGraph<T>, data: &Dataset, test: &Dataset, cfg: &AcquisitionConfig) -> Result<AcquisitionState> {
    if !(cfg.budget_seconds > 0.0) {
        return Err(Error::invalid(format!("budget must be positive, got {}", cfg.budget_seconds)));
    }
    if cfg.points_per_step == 0 {
        return Err(Error::invalid("points per step must be positive"));
    }
    let (labeled, pool) = initial_split(data, cfg.initial_per_class, cfg.seed);
    let mut st = AcquisitionState { labeled, pool, elapsed: 0.0, trace: Vec::new(), acquisitions: 0, pool_exhausted: false };
    st.trace.push(TracePoint { wall_seconds: 0.0, labeled_count: st.labeled.len(), test_accuracy: evaluate(model, test, cfg.round.eval_batch_size)? });
    let mut round = 0u64;
    loop {
        let before = model.clone();
        let t0 = Instant::now();
        let rc = TrainConfig { seed: cfg.round.seed.wrapping_add(round), ..cfg.round.clone() };
        train(model, &data.subset(&st.labeled, Split::Train), None, &rc)?;
        let spent = t0.elapsed().as_secs_f64();
        if st.elapsed + spent > cfg.budget_seconds {
            *model = before;
            break;
        }
        st.elapsed += spent;
        st.trace.push(TracePoint {
            wall_seconds: st.elapsed,
            labeled_count: st.labeled.len(),
            test_accuracy: evaluate(model, test, cfg.round.eval_batch_size)?,
        });
        if st.pool.is_empty() {
            st.pool_exhausted = true;
            break;
        }

        let t0 = Instant::now();
        let mut scores = Vec::with_capacity(st.pool.len());
        for chunk in st.pool.chunks(cfg.score_batch_size.max(1)) {
            scores.extend(entropy_score(model, &data.gather::<T>(chunk).images)?);
        }
        let picks = top_k(&scores, &st.pool, cfg.points_per_step);
        let spent = t0.elapsed().as_secs_f64();
        if st.elapsed + spent > cfg.budget_seconds {
            break;
        }
        st.elapsed += spent;
        let mut chosen: Vec<usize> = picks.iter().map(|&p| st.pool[p]).collect();
        chosen.sort_unstable();
        st.pool.retain(|i| chosen.binary_search(i).is_err());
        st.labeled.extend(chosen);
        st.labeled.sort_unstable();
        st.acquisitions += 1;
        round += 1;
    }
    Ok(st)
}

/// `wall_seconds,labeled_count,test_accuracy,variant`
pub fn write_trace_csv(traces: &[(&str, &AcquisitionState)], path: &Path) -> Result<()> {
    let mut out = String::from("wall_seconds,labeled_count,test_accuracy,variant\n");
    for (variant, st) in traces {
        for t in &st.trace {
            out.push_str(&format!("{},{},{},{variant}\n", t.wall_seconds, t.labeled_count, t.test_accuracy));
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{synthetic, SyntheticSpec};
    use crate::netgraph::{he_init, LayerSpec};

    #[test]
    fn entropy_examples() {
        let u = Tensor::<f64>::zeros(&[1, 10]);
        assert!((entropy_of_logits(&u)[0] - 10f64.ln()).abs() < 1e-12);
        let mut one = vec![0.0; 10];
        one[3] = 1e4f64;
        assert!(entropy_of_logits(&Tensor::<f64>::from_f64(&[1, 10], &one).unwrap())[0].abs() < 1e-12);
        let a = Tensor::<f64>::from_f64(&[1, 3], &[0.1, 2.0, -1.0]).unwrap();
        let b = Tensor::<f64>::from_f64(&[1, 3], &[-1.0, 0.1, 2.0]).unwrap();
        assert!((entropy_of_logits(&a)[0] - entropy_of_logits(&b)[0]).abs() < 1e-12);
    }

    #[test]
    fn top_k_breaks_ties_by_pool_index() {
        let scores = [0.5, 0.9, 0.5, 0.5];
        let pool = [30, 10, 20, 5];
        assert_eq!(top_k(&scores, &pool, 3), vec![1, 3, 2]);
    }

    fn setup() -> (ModelGraph<f32>, Dataset, Dataset) {
        let spec = SyntheticSpec { classes: 2, channels: 1, size: 2, margin: 2.0, max_shift: 0, ..SyntheticSpec::default() };
        let data = synthetic(&spec, 300, 1, 1).unwrap();
        let specs = [
            LayerSpec::Flatten,
            LayerSpec::Linear { in_features: 4, out_features: 6, prunable: true },
            LayerSpec::Relu,
            LayerSpec::Linear { in_features: 6, out_features: 2, prunable: false },
        ];
        let mut m = ModelGraph::from_specs([1, 2, 2], &specs).unwrap();
        he_init(&mut m, 2);
        (m, data.clone(), data)
    }

    #[test]
    fn tiny_budget_gives_no_acquisitions() {
        let (mut m, data, test) = setup();
        let cfg = AcquisitionConfig { budget_seconds: 1e-9, initial_per_class: 10, ..AcquisitionConfig::default() };
        let st = acquisition_loop(&mut m, &data, &test, &cfg).unwrap();
        assert_eq!((st.acquisitions, st.trace.len(), st.labeled.len()), (0, 1, 20));
    }

    #[test]
    fn huge_budget_consumes_the_pool() {
        let (mut m, data, test) = setup();
        let round = TrainConfig { epochs: 1, milestones: vec![], batch_size: 32, augment: false, ..TrainConfig::default() };
        let cfg = AcquisitionConfig { budget_seconds: 1e9, initial_per_class: 10, points_per_step: 70, round, ..AcquisitionConfig::default() };
        let st = acquisition_loop(&mut m, &data, &test, &cfg).unwrap();
        assert!(st.pool_exhausted && st.pool.is_empty());
        assert_eq!(st.labeled, (0..300).collect::<Vec<_>>());
        assert_eq!(st.acquisitions, 4);
        assert!(st.trace.windows(2).all(|w| w[0].wall_seconds <= w[1].wall_seconds));
    }
}
