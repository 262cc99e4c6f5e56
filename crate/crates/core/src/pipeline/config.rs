use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::nets::NetworkSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = crate::KtdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(crate::KtdError::invalid(format!("unknown optimizer '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Momentum for SGD; ignored by Adam.
    pub momentum: f64,
    /// Inverted dropout on the shared feature during training.
    pub dropout_rate: f64,
    /// Update only the class heads.
    pub freeze_trunk: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            momentum: 0.9,
            dropout_rate: 0.5,
            freeze_trunk: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.epochs >= 1, "epochs must be >= 1, got {}", self.epochs);
        ensure!(self.batch_size >= 1, "batch size must be >= 1");
        ensure!(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            "learning rate must be positive, got {}",
            self.learning_rate
        );
        ensure!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            "Adam betas must lie in [0, 1)"
        );
        ensure!(self.epsilon > 0.0, "epsilon must be positive");
        ensure!((0.0..1.0).contains(&self.momentum), "momentum must lie in [0, 1)");
        ensure!(
            (0.0..1.0).contains(&self.dropout_rate),
            "dropout rate must lie in [0, 1), got {}",
            self.dropout_rate
        );
        Ok(())
    }
}

impl TrainConfig {
    /// Settings for the compact student: a narrow shared feature does not
    /// tolerate heavy dropout, and a higher step size converges in 50 epochs.
    pub fn student() -> Self {
        TrainConfig {
            learning_rate: 3e-3,
            dropout_rate: 0.0,
            ..TrainConfig::default()
        }
    }
}

/// Conv-block network shape: one block per channel count, then a shared
/// fully connected feature of width `feature_width`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub channels: Vec<usize>,
    pub feature_width: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig::teacher()
    }
}

impl ArchConfig {
    /// Pre-training and teacher network.
    pub fn teacher() -> Self {
        ArchConfig {
            channels: vec![8, 16, 16],
            feature_width: 64,
        }
    }

    /// Compact student.
    pub fn student() -> Self {
        ArchConfig {
            channels: vec![2, 4, 8],
            feature_width: 16,
        }
    }

    pub fn build(&self, name: &str, image_size: usize, classes: &[String]) -> Result<NetworkSpec> {
        NetworkSpec::conv_blocks(name, image_size, &self.channels, self.feature_width, classes)
    }
}
