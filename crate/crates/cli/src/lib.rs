//! Library side of the `chanprune` command: argument parsing, configuration
//! and the subcommands.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;

use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use chanprune::pruner::PostPrune;
use chanprune::scoring::Criterion;

use commands::Command;
use config::{DatasetKind, ExperimentConfig, Preset};

#[derive(Parser, Debug)]
#[command(name = "chanprune", version, about = "Single-shot structured pruning before training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Score, threshold and shrink a freshly initialized model.
    Prune(Overrides),
    /// Prune (if configured) and train; writes per-epoch metrics.
    Train(Overrides),
    /// Test accuracy of a checkpoint.
    Eval(Overrides),
    /// FLOP count of a preset or checkpoint.
    Flops(Overrides),
    /// Compare first-order predictions with exact ablations.
    ValidateApprox(Overrides),
    /// Time-budgeted active learning with the full and the pruned model.
    ActiveLearn(Overrides),
}

impl Cmd {
    pub fn split(self) -> (Command, Overrides) {
        match self {
            Cmd::Prune(o) => (Command::Prune, o),
            Cmd::Train(o) => (Command::Train, o),
            Cmd::Eval(o) => (Command::Eval, o),
            Cmd::Flops(o) => (Command::Flops, o),
            Cmd::ValidateApprox(o) => (Command::ValidateApprox, o),
            Cmd::ActiveLearn(o) => (Command::ActiveLearn, o),
        }
    }
}

/// Flags that override fields of the JSON config.
#[derive(Args, Debug, Default, Clone)]
pub struct Overrides {
    /// JSON experiment config; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed to run (repeatable); replaces the config's seed list.
    #[arg(long = "seed")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// 3sp, 3sp-ca, snip, grasp, grasp-structured or uniform.
    #[arg(long)]
    pub criterion: Option<Criterion>,
    /// Fraction of units to prune.
    #[arg(long, conflicts_with = "flop_target")]
    pub ratio: Option<f64>,
    /// Fraction of FLOPs to remove; the prune ratio is searched for.
    #[arg(long)]
    pub flop_target: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Rescale surviving weights by the fan-out ratio after pruning.
    #[arg(long, conflicts_with = "reinit")]
    pub rescale: bool,
    /// Re-initialize the pruned model.
    #[arg(long)]
    pub reinit: bool,
    /// cifar10, mnist or synthetic.
    #[arg(long)]
    pub dataset: Option<DatasetKind>,
    #[arg(long)]
    pub data_path: Option<PathBuf>,
    /// tiny-vgg or vgg19.
    #[arg(long)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub width: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Checkpoint directory (or a previous run's output directory).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

impl Overrides {
    /// Loads the config file (or defaults) and applies the flags.
    pub fn resolve(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        if !self.seeds.is_empty() {
            cfg.seeds = self.seeds.clone();
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(c) = self.criterion {
            cfg.prune.criterion = c;
        }
        if let Some(r) = self.ratio {
            cfg.prune.ratio = Some(r);
            cfg.prune.flop_target = None;
        }
        if let Some(t) = self.flop_target {
            cfg.prune.flop_target = Some(t);
            cfg.prune.ratio = None;
        }
        if let Some(l) = self.lambda {
            cfg.prune.lambda = l;
        }
        if self.rescale {
            cfg.prune.post = PostPrune::Rescale;
        }
        if self.reinit {
            cfg.prune.post = PostPrune::Reinit;
        }
        if let Some(d) = self.dataset {
            cfg.data.dataset = d;
        }
        if let Some(p) = &self.data_path {
            cfg.data.path = Some(p.clone());
        }
        if let Some(p) = self.preset {
            cfg.model.preset = p;
            cfg.model.width = self.width.unwrap_or(p.default_width());
        }
        if let Some(w) = self.width {
            cfg.model.width = w;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
            cfg.train.milestones.retain(|&m| m < e);
        }
        if let Some(c) = &self.checkpoint {
            cfg.checkpoint = Some(c.clone());
        }
        cfg.validate().context("invalid configuration")?;
        Ok(cfg)
    }
}
