//! Run configuration file.
//!
//! The file is TOML restricted to a flat layout: an optional top-level
//! `seed` followed by the sections `[model]`, `[train]`, `[inference]`,
//! `[data]`, `[split]` and `[output]`, each holding plain `key = value`
//! pairs. Every key is optional; unknown keys are rejected.
//!
//! ```toml
//! seed = 7
//!
//! [model]
//! block_widths = [16, 16, 16, 16]   # one internal exit per block
//! head_hidden = 32
//!
//! [train]
//! alphas = [0.3, 0.45, 0.6, 0.75, 0.9]   # internal exits, then final
//! lambda = 0.01
//! regularizer = "mmd"          # none | mmd | hsic
//! kernel = "rbf:median"        # linear | rbf | rbf:median | rbf:<sigma>
//! learning_rate = 0.01
//! epochs = 100
//! batch_size = 256
//!
//! [inference]
//! theta = 0.999
//! mode = "early_exit"          # early_exit | final_only | fixed:<k|f>
//! aggregation = "mean"         # mean | sum
//!
//! [data]
//! source = "synthetic"         # synthetic | csv
//! path = "data.csv"            # csv only
//! samples = 4000
//! num_classes = 3
//! signal_dims = 4
//! spurious_dims = 4
//! spurious_strength = 0.8
//! group_noise = [0.6, 1.0]
//! class_separation = 1.5
//!
//! [split]
//! train = 0.6
//! val = 0.2
//! test = 0.2
//! stratify = true
//!
//! [output]
//! dir = "out"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::fairness::{KernelSpec, Regularizer};
use crate::inference::{ExitMode, InferenceConfig};
use crate::metrics::Aggregation;
use crate::model::{default_alphas, ModelConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub block_widths: Vec<usize>,
    pub head_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            block_widths: vec![16; 4],
            head_hidden: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Defaults to [`default_alphas`] for the configured block count.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alphas: Option<Vec<f64>>,
    pub lambda: f64,
    pub regularizer: Regularizer,
    pub kernel: KernelSpec,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            alphas: None,
            lambda: 0.01,
            regularizer: Regularizer::Mmd,
            kernel: KernelSpec::default(),
            learning_rate: 1e-2,
            epochs: 100,
            batch_size: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceSection {
    pub theta: f64,
    pub mode: ExitMode,
    pub aggregation: Aggregation,
}

impl Default for InferenceSection {
    fn default() -> Self {
        Self {
            theta: 0.999,
            mode: ExitMode::EarlyExit,
            aggregation: Aggregation::Mean,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synthetic,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub samples: usize,
    pub num_classes: usize,
    pub signal_dims: usize,
    pub spurious_dims: usize,
    pub spurious_strength: f64,
    pub group_noise: [f64; 2],
    pub class_separation: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SynthSpec::default();
        Self {
            source: DataSource::Synthetic,
            path: None,
            samples: s.samples,
            num_classes: s.num_classes,
            signal_dims: s.signal_dims,
            spurious_dims: s.spurious_dims,
            spurious_strength: s.spurious_strength,
            group_noise: s.group_noise,
            class_separation: s.class_separation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub stratify: bool,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
            stratify: true,
        }
    }
}

impl SplitSection {
    pub fn fractions(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub train: TrainSection,
    pub inference: InferenceSection,
    pub data: DataSection,
    pub split: SplitSection,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn num_internal_exits(&self) -> usize {
        self.model.block_widths.len()
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.train
            .alphas
            .clone()
            .unwrap_or_else(|| default_alphas(self.num_internal_exits()))
    }

    /// Model configuration for data with `input_dim` features and `num_classes` classes.
    pub fn model_config(&self, input_dim: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            num_classes,
            block_widths: self.model.block_widths.clone(),
            head_hidden: self.model.head_hidden,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            alphas: self.alphas(),
            lambda: self.train.lambda,
            regularizer: self.train.regularizer,
            kernel: self.train.kernel,
            learning_rate: self.train.learning_rate,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            seed: self.seed,
        }
    }

    pub fn inference_config(&self) -> InferenceConfig {
        InferenceConfig {
            theta: self.inference.theta,
            mode: self.inference.mode,
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        let d = &self.data;
        SynthSpec {
            samples: d.samples,
            num_classes: d.num_classes,
            signal_dims: d.signal_dims,
            spurious_dims: d.spurious_dims,
            spurious_strength: d.spurious_strength,
            group_noise: d.group_noise,
            class_separation: d.class_separation,
            seed: self.seed,
        }
    }

    /// Field-level checks that do not need the data.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_internal_exits();
        if n == 0 {
            return Err(Error::config("model.block_widths: at least one block is required"));
        }
        if self.model.block_widths.contains(&0) {
            return Err(Error::config("model.block_widths: widths must be positive"));
        }
        if self.model.head_hidden == 0 {
            return Err(Error::config("model.head_hidden: must be positive"));
        }
        self.train_config().validate(n)?;
        self.inference_config().validate()?;
        if let ExitMode::Fixed(crate::inference::Exit::Internal(k)) = self.inference.mode {
            if k > n {
                return Err(Error::config(format!("inference.mode: exit {k} exceeds {n} internal exits")));
            }
        }
        let f = self.split.fractions();
        if f.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "split: train/val/test must be non-negative and sum to 1, got {f:?}"
            )));
        }
        match self.data.source {
            DataSource::Csv if self.data.path.is_none() => {
                Err(Error::config("data.path: required when data.source = \"csv\""))
            }
            DataSource::Synthetic => self.synth_spec().validate().map_err(|e| match e {
                Error::Data(m) | Error::Config(m) => Error::Config(format!("data: {m}")),
                other => other,
            }),
            DataSource::Csv => Ok(()),
        }
    }
}
