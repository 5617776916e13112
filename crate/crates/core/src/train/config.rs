//! Declarative training configuration with TOML persistence.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub epochs: usize,
    /// Peak learning rate after linear warmup.
    pub lr: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    /// Weight of the QA extraction loss.
    pub lambda_c: f64,
    /// Weight of the attention alignment loss.
    pub lambda_kl: f64,
    /// Weight of the max-margin loss.
    pub lambda_m: f64,
    pub margin_power: i32,
    /// Optimizer steps before the margin loss switches on (0 = from the start).
    pub margin_delay_steps: u64,
    /// QA pairs fed to the model per document (top-k oracle or ranked).
    pub qa_pairs: usize,
    pub beam: usize,
    /// Validate every this many optimizer steps; 0 means once per epoch.
    pub validate_every: u64,
    pub lm_epochs: usize,
    pub lm_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            seed: 17,
            epochs: 50,
            lr: 2e-3,
            warmup_steps: 300,
            batch_size: 4,
            grad_accum: 1,
            lambda_c: 1.0,
            lambda_kl: 1.0,
            lambda_m: 1.0,
            margin_power: 5,
            margin_delay_steps: 0,
            qa_pairs: 8,
            beam: 4,
            validate_every: 0,
            lm_epochs: 5,
            lm_lr: 3e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        self.model.validate()?;
        if self.lambda_c < 0.0 || self.lambda_kl < 0.0 || self.lambda_m < 0.0 {
            return Err(CoreError::Config("loss weights must be non-negative".into()));
        }
        if self.qa_pairs == 0 {
            return Err(CoreError::Config("qa_pairs must be ≥ 1".into()));
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return Err(CoreError::Config("batch_size and grad_accum must be ≥ 1".into()));
        }
        if !(self.lr > 0.0) || !(self.lm_lr > 0.0) {
            return Err(CoreError::Config("learning rates must be positive".into()));
        }
        if self.beam == 0 {
            return Err(CoreError::Config("beam must be ≥ 1".into()));
        }
        if self.margin_power < 1 {
            return Err(CoreError::Config("margin_power must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn load_toml(path: &Path) -> Result<Self, CoreError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: TrainConfig = toml::from_str(&text)
            .map_err(|e| CoreError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save_toml(&self, path: &Path) -> Result<(), CoreError> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| CoreError::Config(format!("serializing config: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// The four training-time ablations alongside the full objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ablation {
    /// All four losses with QA-pair graph input.
    Full,
    /// No QA head and no alignment (λ_c = λ_KL = 0) and no question nodes.
    NoMultiTask,
    /// Alignment off (λ_KL = 0); QA head still trains.
    NoQaAttention,
    /// Margin loss off (λ_m = 0).
    NoMargin,
    /// Random answerable pairs replace the oracle selection during training.
    RandomQa,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::NoMultiTask,
        Ablation::NoQaAttention,
        Ablation::NoMargin,
        Ablation::RandomQa,
    ];

    /// Loss weights after applying this ablation to a base configuration.
    pub fn weights(self, cfg: &TrainConfig) -> (f64, f64, f64) {
        match self {
            Ablation::Full | Ablation::RandomQa => (cfg.lambda_c, cfg.lambda_kl, cfg.lambda_m),
            Ablation::NoMultiTask => (0.0, 0.0, cfg.lambda_m),
            Ablation::NoQaAttention => (cfg.lambda_c, 0.0, cfg.lambda_m),
            Ablation::NoMargin => (cfg.lambda_c, cfg.lambda_kl, 0.0),
        }
    }

    /// Whether QA pairs feed the graph and selector under this ablation.
    pub fn uses_qa_input(self) -> bool {
        !matches!(self, Ablation::NoMultiTask)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Ablation::Full => "full",
            Ablation::NoMultiTask => "no-multi-task",
            Ablation::NoQaAttention => "no-qa-attention",
            Ablation::NoMargin => "no-margin",
            Ablation::RandomQa => "random-qa",
        };
        f.write_str(name)
    }
}

impl FromStr for Ablation {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Ablation::Full),
            "no-multi-task" => Ok(Ablation::NoMultiTask),
            "no-qa-attention" => Ok(Ablation::NoQaAttention),
            "no-margin" => Ok(Ablation::NoMargin),
            "random-qa" => Ok(Ablation::RandomQa),
            other => Err(CoreError::Config(format!(
                "unknown ablation `{other}` (expected full, no-multi-task, \
                 no-qa-attention, no-margin, or random-qa)"
            ))),
        }
    }
}
