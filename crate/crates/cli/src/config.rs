//! Experiment configuration: a JSON document with every default materialized.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use chanprune::active::AcquisitionConfig;
use chanprune::dataio::{load_cifar10, load_mnist, synthetic_split, Dataset, Split, SyntheticSpec};
use chanprune::diffcore::Real;
use chanprune::netgraph::{build_vgg_like, he_init, ModelGraph, VggLayout};
use chanprune::pipeline::PruneSpec;
use chanprune::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    TinyVgg,
    Vgg19,
}

impl Preset {
    pub fn default_width(self) -> f64 {
        match self {
            Preset::TinyVgg => 0.25,
            Preset::Vgg19 => 1.0,
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        match s {
            "tiny-vgg" => Ok(Preset::TinyVgg),
            "vgg19" => Ok(Preset::Vgg19),
            _ => bail!("unknown preset `{s}` (expected tiny-vgg or vgg19)"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub preset: Preset,
    pub width: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { preset: Preset::TinyVgg, width: Preset::TinyVgg.default_width() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Cifar10,
    Mnist,
    Synthetic,
}

impl std::str::FromStr for DatasetKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        match s {
            "cifar10" => Ok(DatasetKind::Cifar10),
            "mnist" => Ok(DatasetKind::Mnist),
            "synthetic" => Ok(DatasetKind::Synthetic),
            _ => bail!("unknown dataset `{s}` (expected cifar10, mnist or synthetic)"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub dataset: DatasetKind,
    /// Directory with the dataset files (not used for synthetic data).
    pub path: Option<PathBuf>,
    /// Optional subsample sizes.
    pub train_size: Option<usize>,
    pub test_size: Option<usize>,
    /// Side length MNIST digits are padded to.
    pub image_size: usize,
    pub synthetic: SyntheticSpec,
    /// Seed for synthetic prototypes and subsampling.
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dataset: DatasetKind::Synthetic,
            path: None,
            train_size: Some(2000),
            test_size: Some(500),
            image_size: 32,
            synthetic: SyntheticSpec::default(),
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn load(&self) -> anyhow::Result<(Dataset, Dataset)> {
        let dir = || self.path.as_deref().with_context(|| format!("dataset {:?} needs a data path", self.dataset));
        let (train, test) = match self.dataset {
            DatasetKind::Cifar10 => load_cifar10(dir()?)?,
            DatasetKind::Mnist => load_mnist(dir()?, self.image_size)?,
            DatasetKind::Synthetic => {
                synthetic_split(&self.synthetic, self.train_size.unwrap_or(5000), self.test_size.unwrap_or(1000), self.seed)?
            }
        };
        let cut = |d: Dataset, n: Option<usize>, split: Split| match n {
            Some(n) if n < d.len() => d.sample(n, self.seed, split),
            _ => d,
        };
        Ok((cut(train, self.train_size, Split::Train), cut(test, self.test_size, Split::Test)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub batch_size: usize,
    /// Every `weight_stride`-th weight enters the unstructured study.
    pub weight_stride: usize,
    /// Also run the (expensive) gradient-norm study for structured GraSP.
    pub grasp: bool,
    pub grasp_unit_stride: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig { batch_size: 64, weight_stride: 500, grasp: true, grasp_unit_stride: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub prune: PruneSpec,
    /// Size of the class-balanced scoring minibatch.
    pub score_batch_size: usize,
    pub train: TrainConfig,
    pub active: AcquisitionConfig,
    pub oracle: OracleConfig,
    /// Existing checkpoint for `train`, `eval` and `flops`.
    pub checkpoint: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::default(),
            data: DataConfig::default(),
            prune: PruneSpec { ratio: Some(0.0), ..PruneSpec::default() },
            score_batch_size: 128,
            train: TrainConfig::default(),
            active: AcquisitionConfig::default(),
            oracle: OracleConfig::default(),
            checkpoint: None,
            seeds: vec![0],
            out: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.seeds.is_empty() {
            bail!("seed list is empty");
        }
        if !(self.model.width > 0.0) {
            bail!("width multiplier must be positive, got {}", self.model.width);
        }
        if self.score_batch_size == 0 {
            bail!("score batch size must be positive");
        }
        self.prune.validate()?;
        self.train.validate()?;
        self.active.round.validate()?;
        Ok(())
    }

    /// Whether the configuration asks for any pruning at all.
    pub fn prunes(&self) -> bool {
        self.prune.flop_target.is_some() || self.prune.ratio.is_some_and(|p| p > 0.0)
    }

    /// Zero-initialized preset for `data`'s image shape and class count.
    pub fn build_model<T: Real>(&self, data: &Dataset) -> anyhow::Result<ModelGraph<T>> {
        let layout = VggLayout::vgg19(self.model.width)?;
        Ok(build_vgg_like(data.image_shape(), data.num_classes, &layout)?)
    }

    pub fn init_model<T: Real>(&self, data: &Dataset, seed: u64) -> anyhow::Result<ModelGraph<T>> {
        let mut m = self.build_model(data)?;
        he_init(&mut m, seed);
        Ok(m)
    }
}
