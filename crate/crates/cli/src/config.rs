//! Experiment configuration file.
//!
//! A single TOML document with an explicit `schema_version`. Unknown keys are
//! rejected at every level.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dlfd_core::synth::{GenConfig, SplitConfig};
use dlfd_core::unlearn::{MethodKind, TrainConfig, UnlearnConfig};
use dlfd_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default = "default_methods")]
    pub methods: Vec<MethodKind>,
    #[serde(default)]
    pub data: GenConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub unlearn: UnlearnConfig,
    /// Per-method overrides of `unlearn.learning_rate`, keyed by method name.
    #[serde(default)]
    pub learning_rates: BTreeMap<String, f64>,
    #[serde(default)]
    pub evaluation: EvalConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_methods() -> Vec<MethodKind> {
    vec![
        MethodKind::FineTune,
        MethodKind::NegGrad,
        MethodKind::ErrorMax,
        MethodKind::Dlfd,
    ]
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            methods: default_methods(),
            data: GenConfig::default(),
            split: SplitConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            unlearn: UnlearnConfig::default(),
            learning_rates: BTreeMap::new(),
            evaluation: EvalConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    /// Hidden layer whose activations are the feature space; last hidden layer when unset.
    pub feature_layer: Option<usize>,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 64],
            feature_layer: None,
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub mia_seed: u64,
    pub histogram_bins: usize,
    pub histogram_range: (f64, f64),
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mia_seed: 0,
            histogram_bins: 25,
            histogram_range: (0.0, 5.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Jsonl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Used when no `--out` is given.
    pub dir: Option<PathBuf>,
    pub formats: Vec<ReportFormat>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: None,
            formats: vec![ReportFormat::Csv, ReportFormat::Jsonl],
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version: expected {SCHEMA_VERSION}, got {}",
                self.schema_version
            )));
        }
        self.data.validate()?;
        self.train.validate()?;
        self.unlearn.validate()?;
        if self.model.hidden.contains(&0) {
            return Err(Error::Config("model.hidden: layer widths must be positive".into()));
        }
        for (name, &lr) in &self.learning_rates {
            name.parse::<MethodKind>()
                .map_err(|e| Error::Config(format!("learning_rates.{name}: {e}")))?;
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::Config(format!("learning_rates.{name}: must be >= 0, got {lr}")));
            }
        }
        let (lo, hi) = self.evaluation.histogram_range;
        if self.evaluation.histogram_bins == 0 || !(lo < hi) {
            return Err(Error::Config(
                "evaluation: histogram_bins must be >= 1 and histogram_range must satisfy lo < hi".into(),
            ));
        }
        Ok(())
    }

    /// Sets every training-related seed: data generation, original training and unlearning.
    pub fn override_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.train.seed = seed;
        self.unlearn.seed = seed;
    }

    /// Unlearning settings for one method, with its learning-rate override applied.
    pub fn unlearn_for(&self, method: MethodKind) -> UnlearnConfig {
        let mut cfg = self.unlearn;
        if let Some(lr) = self
            .learning_rates
            .iter()
            .find(|(name, _)| name.parse::<MethodKind>().ok() == Some(method))
            .map(|(_, &lr)| lr)
        {
            cfg.learning_rate = lr;
        }
        cfg
    }

    /// Training budget for a from-scratch model, with a `Retrain` override applied.
    pub fn train_for_retrain(&self) -> TrainConfig {
        let mut cfg = self.train;
        if let Some((_, &lr)) = self
            .learning_rates
            .iter()
            .find(|(name, _)| name.parse::<MethodKind>().ok() == Some(MethodKind::Retrain))
        {
            cfg.learning_rate = lr;
        }
        cfg
    }

    /// SHA-256 of the canonical serialization, echoed into reports.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}
