use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::{
    cifar10_from_bytes, load_cifar10, load_mnist_idx, synth_blobs, synth_images, Dataset, Split, SynthImageSpec,
};
use crate::diagnostics::{DEFAULT_HIST_BINS, DEFAULT_HIST_HI, DEFAULT_HIST_LO};
use crate::error::{Error, Result};
use crate::heads::{HeadKind, HeadSpec};
use crate::layers::{InitScheme, LayerSpec};

pub const DEFAULT_DIVERGENCE_CEILING: f64 = 1e6;

/// A complete experiment description, read from a single JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub head: HeadSpec,
    pub optim: OptimConfig,
    pub run: RunSection,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    /// Alternative head settings looked up by kind when comparing heads.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub heads: Vec<HeadSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    #[serde(flatten)]
    pub source: DataSource,
    /// Seed for subset selection and synthetic generation.
    #[serde(default)]
    pub seed: u64,
    /// Keep this many training samples (seeded shuffle, then take the first n).
    #[serde(default)]
    pub subset: Option<usize>,
    #[serde(default)]
    pub test_subset: Option<usize>,
    /// Per-feature standardization with statistics from the training split.
    #[serde(default)]
    pub standardize: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    /// Directory holding `train-images-idx3-ubyte` and friends.
    Mnist { path: PathBuf },
    /// Directory holding `data_batch_*.bin` and `test_batch.bin`.
    Cifar10 { path: PathBuf },
    Blobs {
        classes: usize,
        dim: usize,
        spread: f64,
        train_per_class: usize,
        test_per_class: usize,
    },
    SynthImages {
        #[serde(flatten)]
        spec: SynthImageSpec,
        test_per_class: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub init: InitScheme,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Learning rate per head kind, overriding `lr` when comparing heads.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub lr_by_head: BTreeMap<HeadKind, f64>,
    #[serde(default = "default_ceiling")]
    pub divergence_ceiling: f64,
}

fn default_ceiling() -> f64 {
    DEFAULT_DIVERGENCE_CEILING
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub trials: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    pub hist_lo: f64,
    pub hist_hi: f64,
    pub hist_bins: usize,
    /// Epochs whose first batch gets a delta histogram.
    pub hist_epochs: Vec<usize>,
    /// Record the normalization term on the first batch of every n-th epoch.
    pub norm_term_every: usize,
    /// Also record it on every batch (overrides `norm_term_every`).
    pub norm_term_all_steps: bool,
    /// Evaluate training error on at most this many training samples.
    pub train_eval_limit: Option<usize>,
    /// Batch size used for error evaluation.
    pub eval_batch: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            hist_lo: DEFAULT_HIST_LO,
            hist_hi: DEFAULT_HIST_HI,
            hist_bins: DEFAULT_HIST_BINS,
            hist_epochs: vec![1, 4],
            norm_term_every: 1,
            norm_term_all_steps: false,
            train_eval_limit: None,
            eval_batch: 500,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::from_json(&fs::read_to_string(path)?)?;
        // Relative data paths are taken relative to the config file.
        if let Some(base) = path.parent() {
            match &mut cfg.dataset.source {
                DataSource::Mnist { path } | DataSource::Cifar10 { path } if path.is_relative() => {
                    *path = base.join(&*path);
                }
                _ => {}
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optim;
        if !(o.lr > 0.0) || !o.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be positive", o.lr)));
        }
        if let Some((kind, lr)) = o.lr_by_head.iter().find(|(_, lr)| !(**lr > 0.0)) {
            return Err(Error::Config(format!("learning rate {lr} for {kind} must be positive")));
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", o.momentum)));
        }
        if o.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if o.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(o.divergence_ceiling > 0.0) {
            return Err(Error::Config("divergence_ceiling must be positive".into()));
        }
        if self.run.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.model.layers.is_empty() {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        let d = &self.diagnostics;
        if !(d.hist_lo < d.hist_hi) || d.hist_bins == 0 {
            return Err(Error::Config("histogram range or bin count is invalid".into()));
        }
        if d.norm_term_every == 0 || d.eval_batch == 0 {
            return Err(Error::Config("norm_term_every and eval_batch must be positive".into()));
        }
        self.head.validate()?;
        for h in &self.heads {
            h.validate()?;
        }
        Ok(())
    }

    /// The head to use for `kind`: the main head if it matches, then the
    /// `heads` list, then the kind's defaults.
    pub fn head_for(&self, kind: HeadKind) -> HeadSpec {
        if self.head.kind == kind {
            return self.head;
        }
        self.heads
            .iter()
            .find(|h| h.kind == kind)
            .copied()
            .unwrap_or_else(|| HeadSpec::default_for(kind))
    }

    pub fn lr_for(&self, kind: HeadKind) -> f64 {
        self.optim.lr_by_head.get(&kind).copied().unwrap_or(self.optim.lr)
    }

    /// A copy configured for another head, with that head's learning rate.
    pub fn with_head(&self, head: HeadSpec) -> RunConfig {
        let mut cfg = self.clone();
        cfg.optim.lr = self.lr_for(head.kind);
        cfg.head = head;
        cfg
    }
}

/// Training and test splits produced from a dataset config.
#[derive(Clone, Debug)]
pub struct DataSplits {
    pub train: Dataset,
    pub test: Dataset,
}

impl DataSplits {
    pub fn num_classes(&self) -> usize {
        self.train.num_classes
    }

    pub fn sample_shape(&self) -> Vec<usize> {
        self.train.sample_shape().to_vec()
    }
}

const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// Loads or generates the data described by `cfg`.
pub fn load_data(cfg: &DatasetConfig) -> Result<DataSplits> {
    let (mut train, mut test) = match &cfg.source {
        DataSource::Mnist { path } => (
            load_mnist_idx(path.join(MNIST_FILES[0]), path.join(MNIST_FILES[1]), Split::Train)?,
            load_mnist_idx(path.join(MNIST_FILES[2]), path.join(MNIST_FILES[3]), Split::Test)?,
        ),
        DataSource::Cifar10 { path } => {
            let mut batches: Vec<PathBuf> = (1..=5)
                .map(|i| path.join(format!("data_batch_{i}.bin")))
                .filter(|p| p.exists())
                .collect();
            if batches.is_empty() {
                batches.push(path.join("data_batch_1.bin"));
            }
            let train = load_cifar10(&batches, Split::Train)?;
            let test = cifar10_from_bytes(&fs::read(path.join("test_batch.bin"))?, Split::Test)?;
            (train, test)
        }
        DataSource::Blobs {
            classes,
            dim,
            spread,
            train_per_class,
            test_per_class,
        } => {
            let all = synth_blobs(*classes, train_per_class + test_per_class, *dim, *spread, cfg.seed)?;
            all.split_at(classes * train_per_class, Split::Train, Split::Test)?
        }
        DataSource::SynthImages { spec, test_per_class } => {
            let full = SynthImageSpec {
                per_class: spec.per_class + test_per_class,
                ..*spec
            };
            let all = synth_images(&full, cfg.seed)?;
            all.split_at(spec.num_classes * spec.per_class, Split::Train, Split::Test)?
        }
    };
    if let Some(n) = cfg.subset {
        train = train.subset(n, cfg.seed);
    }
    if let Some(n) = cfg.test_subset {
        test = test.subset(n, cfg.seed.wrapping_add(1));
    }
    if cfg.standardize {
        let (mean, std) = train.feature_stats();
        train.standardize(&mean, &std);
        test.standardize(&mean, &std);
    }
    Ok(DataSplits { train, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    const BLOBS: &str = r#"{
        "dataset": {"source": "blobs", "classes": 3, "dim": 4, "spread": 0.1,
                    "train_per_class": 10, "test_per_class": 5, "seed": 7},
        "model": {"layers": [{"kind": "dense", "inputs": 4, "outputs": 3}]},
        "head": {"kind": "linear_mse"},
        "optim": {"lr": 0.1, "batch_size": 8, "epochs": 2},
        "run": {"seed": 1, "trials": 1}
    }"#;

    #[test]
    fn parses_minimal_config_with_defaults() {
        let cfg = RunConfig::from_json(BLOBS).unwrap();
        assert_eq!(cfg.optim.momentum, 0.0);
        assert_eq!(cfg.optim.divergence_ceiling, 1e6);
        assert_eq!(cfg.diagnostics.hist_bins, 100);
        assert_eq!(cfg.head, HeadSpec::default_for(HeadKind::LinearMse));
        let again = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(again, cfg);
        let data = load_data(&cfg.dataset).unwrap();
        assert_eq!((data.train.len(), data.test.len()), (30, 15));
    }

    #[test]
    fn rejects_bad_values() {
        let bad_lr = BLOBS.replace("\"lr\": 0.1", "\"lr\": 0.0");
        assert!(matches!(RunConfig::from_json(&bad_lr), Err(Error::Config(_))));
        let bad_trials = BLOBS.replace("\"trials\": 1", "\"trials\": 0");
        assert!(RunConfig::from_json(&bad_trials).is_err());
        let bad_momentum = BLOBS.replace("\"epochs\": 2", "\"epochs\": 2, \"momentum\": 1.0");
        assert!(RunConfig::from_json(&bad_momentum).is_err());
        let unknown = BLOBS.replace("\"run\"", "\"extra\": 1, \"run\"");
        assert!(RunConfig::from_json(&unknown).is_err());
    }

    #[test]
    fn per_head_learning_rates() {
        let text = BLOBS.replace("\"epochs\": 2", "\"epochs\": 2, \"lr_by_head\": {\"exp_gb\": 0.01}");
        let cfg = RunConfig::from_json(&text).unwrap();
        assert_eq!(cfg.lr_for(HeadKind::ExpGb), 0.01);
        assert_eq!(cfg.lr_for(HeadKind::SoftmaxCe), 0.1);
        let gb = cfg.with_head(cfg.head_for(HeadKind::ExpGb));
        assert_eq!(gb.optim.lr, 0.01);
        assert_eq!(gb.head, HeadSpec::default_for(HeadKind::ExpGb));
    }
}
