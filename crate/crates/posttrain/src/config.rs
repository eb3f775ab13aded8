//! Run configuration files (TOML) with command-line overrides.
//!
//! ```toml
//! [model]
//! d_model = 128      # embedding width
//! n_layers = 4
//! n_heads = 4
//! max_seq_len = 256  # tokens
//! seed = 0
//!
//! [train]
//! peak_lr = 1e-3       # per optimizer step
//! batch_size = 16      # examples per step
//! warmup_ratio = 0.1   # fraction of total steps
//! epochs = 1
//! max_seq_len = 256    # tokens
//! beta = 5.0           # DPO KL coefficient
//! seed = 0
//! weight_decay = 0.0
//! grad_clip_norm = 1.0 # 0 disables
//! length_normalize = true
//! ```
//!
//! Missing keys take their defaults; unknown keys are schema errors.

use std::path::{Path, PathBuf};

use posttrain_core::model::{ModelConfig, ModelError};
use posttrain_core::train::{TrainConfig, TrainError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{read_text, IoError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Values given on the command line; each replaces the file value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Overrides {
    pub peak_lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub warmup_ratio: Option<f64>,
    pub epochs: Option<usize>,
    pub beta: Option<f64>,
    pub max_seq_len: Option<usize>,
    /// Sets both the training seed and the model-initialization seed.
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: e.message().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&read_text(path)?, path)
    }

    /// Loads `path` when given, else the defaults; applies `overrides`;
    /// validates.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        let t = &mut self.train;
        if let Some(v) = o.peak_lr {
            t.peak_lr = v;
        }
        if let Some(v) = o.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = o.warmup_ratio {
            t.warmup_ratio = v;
        }
        if let Some(v) = o.epochs {
            t.epochs = v;
        }
        if let Some(v) = o.beta {
            t.beta = v;
        }
        if let Some(v) = o.max_seq_len {
            t.max_seq_len = v;
        }
        if let Some(v) = o.seed {
            t.seed = v;
            self.model.seed = v;
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_partial_files() {
        let cfg = RunConfig::parse("[train]\npeak_lr = 3e-4\n", Path::new("c.toml")).unwrap();
        assert_eq!(cfg.train.peak_lr, 3e-4);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            RunConfig::parse("[train]\nlearning_rate = 1.0\n", Path::new("c.toml")),
            Err(ConfigError::Parse { .. })
        ));
        assert!(RunConfig::parse("[model]\nwidth = 3\n", Path::new("c.toml")).is_err());
    }

    #[test]
    fn overrides_then_validation() {
        let mut cfg = RunConfig::default();
        cfg.apply(&Overrides {
            batch_size: Some(0),
            seed: Some(9),
            ..Overrides::default()
        });
        assert_eq!(cfg.model.seed, 9);
        assert_eq!(cfg.train.seed, 9);
        assert!(matches!(cfg.validate(), Err(ConfigError::Train(TrainError::Config(_)))));
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.train.peak_lr = 3.0000000000000004e-4;
        let back = RunConfig::parse(&cfg.to_toml(), Path::new("x")).unwrap();
        assert_eq!(back, cfg);
    }
}
