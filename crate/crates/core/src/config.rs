// Copyright 2026 The gateprune Authors
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//     http://www.apache.org/licenses/LICENSE-2.0
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! Run configuration: training settings plus data source, model and output location,
//! read from TOML. Every section and key is optional; unknown keys are rejected.
//!
//! ```toml
//! output_dir = "runs/lenet300"
//! checkpoint_every = 10          # optional, epochs
//!
//! [data]
//! kind = "mnist"                 # or "blobs"
//! dir = "data/mnist"             # defaults to $PRUNE_DATA_DIR
//! train_subset = 10000           # optional: first n training samples
//!
//! [model]
//! arch = "mlp"                   # or "lenet5"
//! hidden = [300, 100]
//!
//! [train]
//! lambda = 20.0
//! epochs = 50
//! batch_size = 64
//! fine_tune_epochs = 10
//! input_threshold = 1e-4
//! schedule = { kind = "adam", lr = 1e-3 }
//! prior = { family = "flattening", log_gamma = -25.0 }
//! estimator = { kind = "taylor" }
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_mnist, Blobs, Dataset, MnistSplit};
use crate::error::{Error, Result};
use crate::network::{LayerSpec, DEFAULT_LEAK};
use crate::tensor::{ActivationKind, LossKind};
use crate::trainer::{TrainConfig, MAX_SEED};

/// Environment variable naming the dataset root directory.
pub const DATA_DIR_ENV: &str = "PRUNE_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    Mnist,
    Blobs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    /// MNIST directory; falls back to `$PRUNE_DATA_DIR`.
    pub dir: Option<PathBuf>,
    /// Use only the first `n` training samples.
    pub train_subset: Option<usize>,
    pub classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub center_scale: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: DataKind::Blobs,
            dir: None,
            train_subset: None,
            classes: 4,
            dim: 16,
            train_per_class: 500,
            test_per_class: 500,
            center_scale: 1.0,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kind == DataKind::Blobs
            && (self.classes < 2 || self.dim == 0 || self.train_per_class == 0 || self.test_per_class == 0)
        {
            return Err(Error::Config("blobs need >= 2 classes, dim >= 1 and >= 1 sample per class".into()));
        }
        if self.seed > MAX_SEED {
            return Err(Error::Config(format!("data seed must be at most {MAX_SEED}")));
        }
        if self.train_subset == Some(0) {
            return Err(Error::Config("train_subset must be positive".into()));
        }
        Ok(())
    }

    /// MNIST directory from the config or the environment.
    pub fn mnist_dir(&self) -> Result<PathBuf> {
        match &self.dir {
            Some(d) => Ok(d.clone()),
            None => std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).ok_or_else(|| {
                Error::Config(format!("no MNIST directory: set data.dir or ${DATA_DIR_ENV}"))
            }),
        }
    }

    /// Loads the training and test sets.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        let (train, test) = match self.kind {
            DataKind::Mnist => {
                let dir = self.mnist_dir()?;
                (load_mnist(&dir, MnistSplit::Train)?, load_mnist(&dir, MnistSplit::Test)?)
            }
            DataKind::Blobs => {
                let blobs = Blobs::random(self.classes, self.dim, self.center_scale, self.seed);
                (
                    blobs.sample(self.train_per_class, self.seed.wrapping_add(1), "train")?,
                    blobs.sample(self.test_per_class, self.seed.wrapping_add(2), "test")?,
                )
            }
        };
        let train = match self.train_subset {
            Some(n) if n < train.len() => train.head(n),
            _ => train,
        };
        Ok((train, test))
    }

    pub fn load_test(&self) -> Result<Dataset> {
        self.validate()?;
        match self.kind {
            DataKind::Mnist => load_mnist(&self.mnist_dir()?, MnistSplit::Test),
            DataKind::Blobs => Blobs::random(self.classes, self.dim, self.center_scale, self.seed).sample(
                self.test_per_class,
                self.seed.wrapping_add(2),
                "test",
            ),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    Mlp,
    Lenet5,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Gated hidden layer widths of the MLP.
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { arch: Arch::Mlp, hidden: vec![300, 100] }
    }
}

impl ModelConfig {
    /// Input shape and layer specification for a dataset with `features` inputs and
    /// `classes` outputs.
    pub fn build(&self, features: usize, classes: usize) -> Result<(Vec<usize>, Vec<LayerSpec>)> {
        let leaky = ActivationKind::LeakyRelu { slope: DEFAULT_LEAK };
        let out = LayerSpec::Dense { units: classes, activation: ActivationKind::SoftmaxOutput, gated: false };
        match self.arch {
            Arch::Mlp => {
                if self.hidden.contains(&0) {
                    return Err(Error::Config("hidden layer widths must be positive".into()));
                }
                let mut specs: Vec<LayerSpec> = self
                    .hidden
                    .iter()
                    .map(|&units| LayerSpec::Dense { units, activation: leaky, gated: true })
                    .collect();
                specs.push(out);
                Ok((vec![features], specs))
            }
            Arch::Lenet5 => {
                if features != 784 {
                    return Err(Error::Config(format!("lenet5 needs 28x28 inputs, got {features} features")));
                }
                let conv = |filters| LayerSpec::Conv { filters, kernel: 5, activation: leaky, gated: true };
                let dense = |units| LayerSpec::Dense { units, activation: leaky, gated: true };
                Ok((
                    vec![1, 28, 28],
                    vec![
                        conv(6),
                        LayerSpec::MaxPool,
                        conv(16),
                        LayerSpec::MaxPool,
                        LayerSpec::Flatten,
                        dense(120),
                        dense(84),
                        out,
                    ],
                ))
            }
        }
    }

    pub fn loss(&self) -> LossKind {
        LossKind::CategoricalCe
    }
}

/// Complete description of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    /// Also checkpoint every `k` epochs.
    pub checkpoint_every: Option<u64>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("runs/default"),
            checkpoint_every: None,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks everything that can be checked without loading data.
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        let (_, specs) = match self.data.kind {
            DataKind::Mnist => self.model.build(784, 10)?,
            DataKind::Blobs => self.model.build(self.data.dim, self.data.classes)?,
        };
        let gated = specs
            .iter()
            .filter(|s| matches!(s, LayerSpec::Dense { gated: true, .. } | LayerSpec::Conv { gated: true, .. }))
            .count();
        self.train.layer_gates(gated)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{EstimatorName, StepSchedule};

    #[test]
    fn documented_example_parses() {
        let text = r#"
output_dir = "runs/lenet300"
[data]
kind = "mnist"
dir = "data/mnist"
[model]
arch = "mlp"
hidden = [300, 100]
[train]
lambda = 20.0
schedule = { kind = "adam", lr = 1e-3 }
prior = { family = "flattening", log_gamma = -25.0 }
estimator = { kind = "taylor" }
input_threshold = 1e-4
"#;
        let c = RunConfig::from_toml(text).unwrap();
        assert_eq!(c.data.kind, DataKind::Mnist);
        assert_eq!(c.train.schedule, StepSchedule::AdamDefaults { lr: 1e-3 });
        assert_eq!(c.train.estimator.kind, EstimatorName::Taylor);
        assert_eq!(c.train.input_threshold, Some(1e-4));
        c.validate().unwrap();
    }

    #[test]
    fn round_trip_and_rejection() {
        let mut c = RunConfig::default();
        c.train.schedule = StepSchedule::RobbinsMonro { a0: 0.1, tau: 100.0 };
        c.train.theta_low = Some(1e-7);
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        assert!(matches!(RunConfig::from_toml("[train]\nlamda = 1.0"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[train]\nlambda = -1.0").unwrap().validate(), Err(Error::Config(_))));
    }

    #[test]
    fn blobs_split_is_deterministic() {
        let d = DataConfig { train_per_class: 3, test_per_class: 2, ..DataConfig::default() };
        let (a, b) = d.load().unwrap();
        assert_eq!((a.len(), b.len()), (12, 8));
        assert_eq!(d.load().unwrap().0, a);
        assert_eq!(d.load_test().unwrap(), b);
    }
}
