//! Subcommands. Each runs once per seed into `out/seed-N/` and then writes the
//! resolved config, a per-seed CSV and an aggregate summary into `out/`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use chanprune::active::{acquisition_loop, write_trace_csv, AcquisitionConfig};
use chanprune::compute::{flop_audit, total_flops, write_flop_audit_csv, CostTable};
use chanprune::dataio::Dataset;
use chanprune::netgraph::{load_checkpoint, save_checkpoint, ModelGraph};
use chanprune::oracle::{
    calibrate_bn, rank_correlation, structured_gradnorm_ablations, structured_loss_ablations, unstructured_loss_ablations,
    write_calibration_csv, write_records_csv, StudySummary,
};
use chanprune::pipeline::{prune, prune_unstructured};
use chanprune::pruner::save_pruned;
use chanprune::scoring::{write_score_dump, Criterion};
use chanprune::trainer::{evaluate, mean_se, train, write_metrics_csv, MeanSe, TrainConfig};

use crate::config::ExperimentConfig;

pub type Metrics = BTreeMap<String, f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Prune,
    Train,
    Eval,
    Flops,
    ValidateApprox,
    ActiveLearn,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Prune => "prune",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Flops => "flops",
            Command::ValidateApprox => "validate-approx",
            Command::ActiveLearn => "active-learn",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub command: String,
    pub seeds: Vec<u64>,
    pub failed: Vec<SeedFailure>,
    /// Mean and standard error of each metric over the completed seeds.
    pub metrics: BTreeMap<String, MeanSe>,
}

impl Summary {
    pub fn ok(&self) -> bool {
        self.failed.is_empty()
    }
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

/// Runs `cmd` for every seed. Per-seed errors are collected, not propagated.
pub fn run(cmd: Command, cfg: &ExperimentConfig) -> anyhow::Result<Summary> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    write_json(&cfg.out.join("config.json"), cfg)?;
    let (train, test) = cfg.data.load()?;
    log::info!("{}: {} train / {} test examples, seeds {:?}", cmd.name(), train.len(), test.len(), cfg.seeds);

    let mut per_seed: Vec<(u64, Metrics)> = Vec::new();
    let mut failed = Vec::new();
    for &seed in &cfg.seeds {
        let dir = seed_dir(&cfg.out, seed);
        let result = std::fs::create_dir_all(&dir)
            .with_context(|| format!("creating {}", dir.display()))
            .and_then(|_| write_json(&dir.join("config.json"), cfg))
            .and_then(|_| run_seed(cmd, cfg, seed, &dir, &train, &test));
        match result {
            Ok(m) => {
                write_json(&dir.join("metrics.json"), &m)?;
                per_seed.push((seed, m));
            }
            Err(e) => {
                log::error!("seed {seed} failed: {e:#}");
                failed.push(SeedFailure { seed, error: format!("{e:#}") });
            }
        }
    }

    let names: Vec<String> = per_seed.iter().flat_map(|(_, m)| m.keys().cloned()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let mut csv = format!("seed,{}\n", names.join(","));
    for (seed, m) in &per_seed {
        let row: Vec<String> = names.iter().map(|n| m.get(n).map(|v| v.to_string()).unwrap_or_default()).collect();
        csv.push_str(&format!("{seed},{}\n", row.join(",")));
    }
    let path = cfg.out.join("per_seed.csv");
    std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;

    let metrics = names
        .iter()
        .map(|n| {
            let vals: Vec<f64> = per_seed.iter().filter_map(|(_, m)| m.get(n).copied()).collect();
            (n.clone(), mean_se(&vals))
        })
        .collect();
    let summary = Summary { command: cmd.name().to_string(), seeds: cfg.seeds.clone(), failed, metrics };
    write_json(&cfg.out.join("summary.json"), &summary)?;
    Ok(summary)
}

fn run_seed(cmd: Command, cfg: &ExperimentConfig, seed: u64, dir: &Path, train: &Dataset, test: &Dataset) -> anyhow::Result<Metrics> {
    match cmd {
        Command::Prune => cmd_prune(cfg, seed, dir, train),
        Command::Train => cmd_train(cfg, seed, dir, train, test),
        Command::Eval => cmd_eval(cfg, seed, test),
        Command::Flops => cmd_flops(cfg, seed, dir, train),
        Command::ValidateApprox => cmd_validate_approx(cfg, seed, dir, train),
        Command::ActiveLearn => cmd_active(cfg, seed, dir, train, test),
    }
}

/// Checkpoint for `seed` under the configured path: `seed-N/` if present,
/// else the path itself.
pub fn resolve_checkpoint(root: &Path, seed: u64) -> anyhow::Result<PathBuf> {
    let per_seed = seed_dir(root, seed);
    for dir in [per_seed.join("model"), per_seed, root.join("model"), root.to_path_buf()] {
        if dir.join("arch.json").is_file() {
            return Ok(dir);
        }
    }
    bail!("no checkpoint (arch.json) for seed {seed} under {}", root.display())
}

fn checkpoint_model(cfg: &ExperimentConfig, seed: u64) -> anyhow::Result<Option<ModelGraph<f32>>> {
    match &cfg.checkpoint {
        Some(root) => {
            let dir = resolve_checkpoint(root, seed)?;
            Ok(Some(load_checkpoint(&dir).with_context(|| format!("loading {}", dir.display()))?))
        }
        None => Ok(None),
    }
}

fn is_unstructured(c: Criterion) -> bool {
    matches!(c, Criterion::Snip | Criterion::Grasp)
}

struct Pruned {
    model: ModelGraph<f32>,
    metrics: Metrics,
}

/// Initializes with `seed`, scores one class-balanced minibatch, prunes and
/// writes the pruned checkpoint and reports into `dir`.
fn init_and_prune(cfg: &ExperimentConfig, seed: u64, dir: &Path, train: &Dataset) -> anyhow::Result<Pruned> {
    let model = cfg.init_model::<f32>(train, seed)?;
    let batch = train.class_balanced_batch::<f32>(cfg.score_batch_size, seed);
    let spec = chanprune::pipeline::PruneSpec { seed, ..cfg.prune.clone() };
    let structured = !is_unstructured(spec.criterion);
    let outcome = if structured { prune(&model, &batch.images, &batch.labels, &spec)? } else { prune_unstructured(&model, &batch.images, &batch.labels, &spec)? };
    let mdir = dir.join("model");
    let bytes = match &outcome.masks {
        Some(masks) => {
            let shrunk_unscaled = chanprune::pruner::shrink(&model, masks)?;
            write_flop_audit_csv(&flop_audit(&model, &shrunk_unscaled, masks)?, &dir.join("flop_audit.csv"))?;
            if let (Some(scores), Criterion::ThreeSp | Criterion::ThreeSpCa) = (&outcome.scores, spec.criterion) {
                write_score_dump(&dir.join("scores.csv"), scores, &CostTable::for_model(&model, spec.lambda)?, masks)?;
            }
            save_pruned(&mdir, &outcome.model, masks, &outcome.report)?
        }
        None => {
            let b = save_checkpoint(&outcome.model, &mdir)?;
            write_json(&mdir.join("report.json"), &outcome.report)?;
            b
        }
    };
    let r = &outcome.report;
    let metrics = Metrics::from([
        ("prune_ratio".into(), outcome.ratio),
        ("units_pruned".into(), r.units_pruned as f64),
        ("params_after".into(), r.params_after as f64),
        ("flops_after".into(), r.flops_after as f64),
        ("flop_reduction".into(), r.flop_reduction()),
        ("prune_ms".into(), r.prune_ms),
        ("checkpoint_bytes".into(), bytes as f64),
    ]);
    Ok(Pruned { model: outcome.model, metrics })
}

fn cmd_prune(cfg: &ExperimentConfig, seed: u64, dir: &Path, train: &Dataset) -> anyhow::Result<Metrics> {
    Ok(init_and_prune(cfg, seed, dir, train)?.metrics)
}

fn cmd_train(cfg: &ExperimentConfig, seed: u64, dir: &Path, train_set: &Dataset, test: &Dataset) -> anyhow::Result<Metrics> {
    let (mut model, mut metrics) = match checkpoint_model(cfg, seed)? {
        Some(m) => (m, Metrics::new()),
        None if cfg.prunes() => {
            let p = init_and_prune(cfg, seed, dir, train_set)?;
            (p.model, p.metrics)
        }
        None => (cfg.init_model(train_set, seed)?, Metrics::new()),
    };
    let tc = TrainConfig { seed, ..cfg.train.clone() };
    let run = train(&mut model, train_set, Some(test), &tc)?;
    write_metrics_csv(&run, &dir.join("train.csv"))?;
    write_json(&dir.join("run.json"), &run)?;
    let bytes = save_checkpoint(&model, &dir.join("trained"))?;
    let secs: Vec<f64> = run.epochs.iter().map(|e| e.epoch_seconds).collect();
    metrics.insert("final_test_acc".into(), run.final_test_acc.unwrap_or(f64::NAN));
    metrics.insert("epoch_seconds".into(), mean_se(&secs).mean);
    metrics.insert("flops".into(), total_flops(&model)?.total() as f64);
    metrics.insert("params".into(), model.param_count() as f64);
    metrics.insert("trained_bytes".into(), bytes as f64);
    Ok(metrics)
}

fn cmd_eval(cfg: &ExperimentConfig, seed: u64, test: &Dataset) -> anyhow::Result<Metrics> {
    let Some(model) = checkpoint_model(cfg, seed)? else { bail!("eval needs a checkpoint") };
    Ok(Metrics::from([
        ("test_acc".into(), evaluate(&model, test, cfg.train.eval_batch_size)?),
        ("flops".into(), total_flops(&model)?.total() as f64),
        ("params".into(), model.param_count() as f64),
    ]))
}

fn cmd_flops(cfg: &ExperimentConfig, seed: u64, dir: &Path, train: &Dataset) -> anyhow::Result<Metrics> {
    let model = match checkpoint_model(cfg, seed)? {
        Some(m) => m,
        None => cfg.build_model::<f32>(train)?,
    };
    let f = total_flops(&model)?;
    let mut csv = String::from("layer_index,kind,flops\n");
    for (i, (layer, fl)) in model.layers.iter().zip(&f.per_layer).enumerate() {
        csv.push_str(&format!("{i},{},{fl}\n", layer.spec().kind()));
    }
    let path = dir.join("flops.csv");
    std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    Ok(Metrics::from([
        ("total_flops".into(), f.total() as f64),
        ("mac_flops".into(), f.mac_flops as f64),
        ("params".into(), model.param_count() as f64),
    ]))
}

fn cmd_validate_approx(cfg: &ExperimentConfig, seed: u64, dir: &Path, train: &Dataset) -> anyhow::Result<Metrics> {
    let model = cfg.init_model::<f64>(train, seed)?;
    let batch = train.class_balanced_batch::<f64>(cfg.oracle.batch_size, seed);
    let model = calibrate_bn(&model, &batch.images)?;
    let mut studies = Vec::new();
    let mut metrics = Metrics::new();
    let mut study = |name: &str, criterion: &str, granularity: &str, records: Vec<_>| -> anyhow::Result<()> {
        write_records_csv(&records, &dir.join(format!("{name}_records.csv")))?;
        let s = rank_correlation(&records)?;
        write_calibration_csv(&s, &dir.join(format!("{name}_calibration.csv")))?;
        metrics.insert(format!("rho_{name}"), s.rho);
        studies.push(StudySummary { criterion: criterion.into(), granularity: granularity.into(), rho: s.rho, n: s.n });
        Ok(())
    };
    study("structured", "3sp", "structured", structured_loss_ablations(&model, &batch.images, &batch.labels, seed)?)?;
    let unstructured = unstructured_loss_ablations(&model, &batch.images, &batch.labels, cfg.oracle.weight_stride, seed)?;
    study("unstructured", "snip", "unstructured", unstructured)?;
    if cfg.oracle.grasp {
        let t = cfg.prune.temperature;
        let recs = structured_gradnorm_ablations(&model, &batch.images, &batch.labels, t, cfg.oracle.grasp_unit_stride, seed)?;
        study("grasp_structured", "grasp-structured", "structured", recs)?;
    }
    write_json(&dir.join("studies.json"), &studies)?;
    Ok(metrics)
}

fn cmd_active(cfg: &ExperimentConfig, seed: u64, dir: &Path, train: &Dataset, test: &Dataset) -> anyhow::Result<Metrics> {
    let acfg = AcquisitionConfig { seed, round: TrainConfig { seed, ..cfg.active.round.clone() }, ..cfg.active.clone() };
    let mut metrics = Metrics::new();
    let mut full = cfg.init_model::<f32>(train, seed)?;
    let t0 = Instant::now();
    let full_state = acquisition_loop(&mut full, train, test, &acfg)?;
    log::info!("seed {seed}: full model finished in {:.1}s", t0.elapsed().as_secs_f64());
    let mut record = |variant: &str, st: &chanprune::active::AcquisitionState| {
        metrics.insert(format!("{variant}_acquisitions"), st.acquisitions as f64);
        metrics.insert(format!("{variant}_final_acc"), st.final_accuracy().unwrap_or(f64::NAN));
        metrics.insert(format!("{variant}_labeled"), st.labeled.len() as f64);
    };
    record("full", &full_state);
    let mut traces = vec![("full", full_state)];
    if cfg.prunes() {
        let mut pruned = init_and_prune(cfg, seed, dir, train)?.model;
        let st = acquisition_loop(&mut pruned, train, test, &acfg)?;
        record("pruned", &st);
        traces.push(("pruned", st));
    }
    let refs: Vec<(&str, &_)> = traces.iter().map(|(n, s)| (*n, s)).collect();
    write_trace_csv(&refs, &dir.join("trace.csv"))?;
    Ok(metrics)
}
