use std::path::Path;
use std::process::Command as Proc;

use chanprune::compute::total_flops;
use chanprune::trainer::mean_se;
use chanprune_cli::commands::{run, Command};
use chanprune_cli::config::ExperimentConfig;
use chanprune_cli::Overrides;
use clap::Parser;

fn small(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig { out: out.to_path_buf(), score_batch_size: 20, ..ExperimentConfig::default() };
    cfg.model.width = 0.125;
    cfg.data.train_size = Some(100);
    cfg.data.test_size = Some(40);
    cfg.train.epochs = 1;
    cfg.train.milestones.clear();
    cfg.oracle.batch_size = 10;
    cfg.oracle.weight_stride = 3000;
    cfg.oracle.grasp = false;
    cfg
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn flops_of_unpruned_preset_match_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let s = run(Command::Flops, &cfg).unwrap();
    let (train, _) = cfg.data.load().unwrap();
    let expected = total_flops(&cfg.build_model::<f32>(&train).unwrap()).unwrap().total() as f64;
    assert_eq!(s.metrics["total_flops"].mean, expected);
}

#[test]
fn zero_ratio_prunes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let s = run(Command::Prune, &cfg).unwrap();
    assert!(s.ok());
    assert_eq!(s.metrics["units_pruned"].mean, 0.0);
    assert_eq!(s.metrics["flop_reduction"].mean, 0.0);
    let report = read_json(&dir.path().join("seed-0/model/report.json"));
    assert_eq!(report["flops_before"], report["flops_after"]);
}

#[test]
fn flop_target_is_reached_within_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.prune.ratio = None;
    cfg.prune.flop_target = Some(0.5);
    let s = run(Command::Prune, &cfg).unwrap();
    let achieved = s.metrics["flop_reduction"].mean;
    assert!((achieved - 0.5).abs() <= 0.01 * 0.5 + 1e-12, "achieved {achieved}");
    assert!(dir.path().join("seed-0/scores.csv").is_file());
    assert!(dir.path().join("seed-0/flop_audit.csv").is_file());
}

#[test]
fn resolved_config_reproduces_itself() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    run(Command::Flops, &cfg).unwrap();
    for p in [dir.path().join("config.json"), dir.path().join("seed-0/config.json")] {
        let text = std::fs::read_to_string(&p).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(serde_json::to_string_pretty(&back).unwrap(), text);
    }
}

#[test]
fn aggregate_over_five_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.seeds = vec![1, 2, 3, 4, 5];
    cfg.prune.ratio = Some(0.5);
    cfg.prune.criterion = chanprune::scoring::Criterion::Uniform;
    let s = run(Command::Prune, &cfg).unwrap();
    let per_seed = std::fs::read_to_string(dir.path().join("per_seed.csv")).unwrap();
    let header: Vec<&str> = per_seed.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|&h| h == "flops_after").unwrap();
    let vals: Vec<f64> = per_seed.lines().skip(1).map(|l| l.split(',').nth(col).unwrap().parse().unwrap()).collect();
    assert_eq!(vals.len(), 5);
    let m = s.metrics["flops_after"];
    assert_eq!(m.n, 5);
    let mean = vals.iter().sum::<f64>() / 5.0;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
    assert!((m.mean - mean).abs() < 1e-9 && (m.se - sd / 5f64.sqrt()).abs() < 1e-9);
    assert_eq!(m, mean_se(&vals));
}

#[test]
fn train_then_eval_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(&dir.path().join("train"));
    cfg.prune.ratio = Some(0.5);
    let trained = run(Command::Train, &cfg).unwrap();
    assert!(trained.ok());
    assert!(dir.path().join("train/seed-0/train.csv").is_file());
    let mut ecfg = small(&dir.path().join("eval"));
    ecfg.checkpoint = Some(dir.path().join("train/seed-0/trained"));
    let e = run(Command::Eval, &ecfg).unwrap();
    assert_eq!(e.metrics["flops"].mean, trained.metrics["flops"].mean);
    assert_eq!(e.metrics["test_acc"].mean, trained.metrics["final_test_acc"].mean);
}

#[test]
fn calibration_csv_is_sorted_by_prediction() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let s = run(Command::ValidateApprox, &cfg).unwrap();
    assert!(s.metrics.contains_key("rho_structured") && s.metrics.contains_key("rho_unstructured"));
    let csv = std::fs::read_to_string(dir.path().join("seed-0/structured_calibration.csv")).unwrap();
    let preds: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(preds.len() > 10 && preds.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn flags_override_config_fields() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    std::fs::write(&path, r#"{"prune": {"criterion": "uniform", "ratio": 0.2}, "seeds": [7]}"#).unwrap();
    #[derive(Parser)]
    struct T {
        #[command(flatten)]
        o: Overrides,
    }
    let args = ["t", "--config", path.to_str().unwrap(), "--criterion", "3sp-ca", "--flop-target", "0.4", "--seed", "1", "--seed", "2", "--reinit"];
    let cfg = T::parse_from(args).o.resolve().unwrap();
    assert_eq!(cfg.prune.criterion, chanprune::scoring::Criterion::ThreeSpCa);
    assert_eq!((cfg.prune.ratio, cfg.prune.flop_target), (None, Some(0.4)));
    assert_eq!(cfg.seeds, vec![1, 2]);
    assert_eq!(cfg.prune.post, chanprune::pruner::PostPrune::Reinit);

    let bad = T::parse_from(["t", "--config", path.to_str().unwrap(), "--ratio", "1.5"]).o.resolve();
    assert!(bad.is_err());
}

#[test]
fn binary_reports_failing_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let status = Proc::new(env!("CARGO_BIN_EXE_chanprune"))
        .args(["eval", "--checkpoint", "/nonexistent", "--seed", "4", "--seed", "9", "--width", "0.125"])
        .arg("--out")
        .arg(&out)
        .env("RUST_LOG", "off")
        .output()
        .unwrap();
    assert!(!status.status.success());
    let err = String::from_utf8_lossy(&status.stderr);
    assert!(err.contains("failing seeds: 4, 9"), "{err}");
    let summary = read_json(&out.join("summary.json"));
    assert_eq!(summary["failed"].as_array().unwrap().len(), 2);

    let ok = Proc::new(env!("CARGO_BIN_EXE_chanprune"))
        .args(["flops", "--width", "0.125"])
        .arg("--out")
        .arg(dir.path().join("flops"))
        .env("RUST_LOG", "off")
        .output()
        .unwrap();
    assert!(ok.status.success());
}
