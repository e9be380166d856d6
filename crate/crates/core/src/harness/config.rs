use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::optim::AdamConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{AblationMode, ModelConfig};
use crate::numerics::Precision;
use crate::synth_data::GenSpec;

/// Where training and evaluation data come from. Paths win over generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub gen: GenSpec,
    pub train_size: usize,
    pub test_size: usize,
    /// Seed of the held-out split; the training split uses `gen.seed`.
    pub test_seed: u64,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            gen: GenSpec::default(),
            train_size: 2000,
            test_size: 500,
            test_seed: 1_000_003,
            train_path: None,
            test_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub total_steps: usize,
    pub seed: u64,
    pub mode: AblationMode,
    pub aux_group: bool,
    pub encoder: EncoderConfig,
    pub unconstrained_init_std: f64,
    pub precision: Precision,
    /// Evaluate on the held-out split every this many steps (0 disables).
    pub eval_every: usize,
    pub adam: AdamConfig,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 1e-3,
            warmup_fraction: 0.1,
            total_steps: 2000,
            seed: 0,
            mode: AblationMode::FusionPerBlockFilter,
            aux_group: true,
            encoder: EncoderConfig::default(),
            unconstrained_init_std: 1.0,
            precision: Precision::F32,
            eval_every: 200,
            adam: AdamConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::ConfigMismatch(format!(
                "warmup_fraction {} outside [0, 1]",
                self.warmup_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::ConfigMismatch("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::ConfigMismatch("learning_rate must be finite and >= 0".into()));
        }
        self.encoder.validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            mode: self.mode,
            aux_group: self.aux_group,
            unconstrained_init_std: self.unconstrained_init_std,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::ConfigMismatch(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            let cfg: TrainConfig =
                serde_json::from_str(&text).map_err(|e| Error::ConfigMismatch(e.to_string()))?;
            cfg.validate()?;
            Ok(cfg)
        } else {
            Self::from_toml_str(&text)
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
