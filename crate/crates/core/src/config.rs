//! The run configuration file.
//!
//! Every section and every key is optional; unknown keys are rejected.
//!
//! ```toml
//! [train]
//! lr_generator = 1e-4
//! steps = 300
//!
//! [loss_weights]
//! alpha = 1.0
//! beta = 10.0
//! gamma = 10.0
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, SyntheticSpec};
use crate::losses::{LossWeights, SsimConfig};
use crate::net::{DiscriminatorConfig, GeneratorConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    /// Generator updates to run.
    pub steps: u64,
    pub seed: u64,
    /// Write `checkpoints/step_<n>.ckpt` every this many steps; 0 disables.
    pub checkpoint_interval: u64,
    /// Validate every this many steps (and always after the last); 0 means last only.
    pub val_interval: u64,
    pub d_steps_per_g_step: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_generator: 1e-4,
            lr_discriminator: 4e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 4,
            steps: 300,
            seed: 7,
            checkpoint_interval: 0,
            val_interval: 0,
            d_steps_per_g_step: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr_generator > 0.0) || !(self.lr_discriminator > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("adam epsilon must be positive");
        }
        if self.batch_size == 0 || self.d_steps_per_g_step == 0 {
            return bad("batch size and discriminator steps must be at least 1");
        }
        Ok(())
    }
}

/// Synthetic dataset: generator template plus split sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// First pair seed; splits take consecutive seeds (train, val, test).
    pub seed: u64,
    pub edge: usize,
    pub blob_count_range: (usize, usize),
    pub blob_sigma_range: (f64, f64),
    pub cavity_count: usize,
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub test_pairs: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        DataConfig {
            seed: 1000,
            edge: s.edge,
            blob_count_range: s.blob_count_range,
            blob_sigma_range: s.blob_sigma_range,
            cavity_count: s.cavity_count,
            train_pairs: 200,
            val_pairs: 20,
            test_pairs: 20,
        }
    }
}

impl DataConfig {
    pub fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            seed: self.seed,
            edge: self.edge,
            blob_count_range: self.blob_count_range,
            blob_sigma_range: self.blob_sigma_range,
            cavity_count: self.cavity_count,
        }
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest::sequential(self.spec(), self.train_pairs, self.val_pairs, self.test_pairs)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub loss_weights: LossWeights,
    /// Structural-similarity settings of the loss term.
    pub ssim: SsimConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_toml(&text)
    }

    /// Fully resolved configuration, every default spelled out.
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.loss_weights.validate()?;
        self.ssim.validate()?;
        self.data.spec().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.train.steps = 12;
        cfg.generator.self_attention = None;
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_toml("[train]\nlearning_rate = 1.0\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        assert!(RunConfig::from_toml("[bogus]\n").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml("[train]\nbatch_size = 0\n").is_err());
        assert!(RunConfig::from_toml("[loss_weights]\nalpha = 0.0\nbeta = 0.0\ngamma = 0.0\n").is_err());
        assert!(RunConfig::from_toml("[data]\nedge = 12\n").is_err());
    }
}
