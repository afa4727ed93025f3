use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Optimisation settings, read from a flat TOML table. Missing keys take
/// the defaults below; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Closed-loop evaluation period in steps (0 disables it).
    pub eval_every: usize,
    /// Micro-batches whose gradients are summed before one update.
    pub accum: usize,
    /// Worker threads for batch shards; results do not depend on it.
    pub threads: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub data: Option<PathBuf>,
    pub model_config: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.01,
            clip_norm: 1.0,
            batch_size: 32,
            steps: 2000,
            seed: 0,
            eval_every: 0,
            accum: 1,
            threads: 1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            data: None,
            model_config: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!(
                "clip_norm must be > 0, got {}",
                self.clip_norm
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.steps == 0 || self.batch_size == 0 || self.accum == 0 {
            return Err(Error::Config(
                "steps, batch_size and accum must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.adam_eps > 0.0)
        {
            return Err(Error::Config(
                "adam betas must be in [0, 1) and eps > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}
