//! Run configuration.
//!
//! The on-disk form is flat `key = value` text (a TOML subset): strings are
//! quoted, numbers and booleans bare. Unknown keys are rejected. Every
//! checkpoint and report embeds [`ModelConfig::to_text`] so a run can be
//! traced back to the exact settings that produced it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Spdnet,
    Linear,
    Persistence,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Spdnet => "spdnet",
            ModelKind::Linear => "linear",
            ModelKind::Persistence => "persistence",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spdnet" => Ok(ModelKind::Spdnet),
            "linear" => Ok(ModelKind::Linear),
            "persistence" => Ok(ModelKind::Persistence),
            other => Err(Error::Config(format!(
                "unknown model `{other}` (expected spdnet, linear or persistence)"
            ))),
        }
    }
}

/// Synthetic residential-load profile. Times are in 15-minute steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticProfile {
    pub length: usize,
    pub base: f64,
    pub daily_amplitude: f64,
    pub daily_period: usize,
    pub weekly_amplitude: f64,
    pub weekly_period: usize,
    pub ar_coefficient: f64,
    pub noise_std: f64,
    pub spike_probability: f64,
    pub spike_magnitude: f64,
    pub covariates: bool,
}

impl Default for SyntheticProfile {
    fn default() -> Self {
        Self {
            length: 20_000,
            base: 1.5,
            daily_amplitude: 1.0,
            daily_period: 96,
            weekly_amplitude: 0.4,
            weekly_period: 672,
            ar_coefficient: 0.8,
            noise_std: 0.15,
            spike_probability: 0.002,
            spike_magnitude: 1.5,
            covariates: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub model: ModelKind,
    pub seq_len: usize,
    pub horizon: usize,
    /// Number of variates; 0 means "take it from the data".
    pub n_vars: usize,
    pub top_k: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub e_layers: usize,
    pub d_ff: usize,
    pub activation: Activation,
    pub trend_kernel: usize,
    pub seasonal_kernel: usize,
    pub layer_norm_eps: f64,

    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub bench_epochs: usize,

    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Forecast target column; metrics and loss are computed on it.
    pub target: String,
    pub forward_fill: bool,

    pub synthetic: SyntheticProfile,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Spdnet,
            seq_len: 96,
            horizon: 24,
            n_vars: 0,
            top_k: 3,
            d_model: 64,
            n_heads: 4,
            e_layers: 2,
            d_ff: 128,
            activation: Activation::Gelu,
            trend_kernel: 25,
            seasonal_kernel: 7,
            layer_norm_eps: 1e-5,
            batch_size: 32,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            max_epochs: 50,
            patience: 5,
            seed: 42,
            bench_epochs: 3,
            train_fraction: 0.7,
            val_fraction: 0.1,
            test_fraction: 0.2,
            target: "load".into(),
            forward_fill: false,
            synthetic: SyntheticProfile::default(),
        }
    }
}

impl ModelConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.seq_len < 4 {
            return fail(format!("seq_len {} must be at least 4", self.seq_len));
        }
        if self.horizon == 0 {
            return fail("horizon must be positive".into());
        }
        if self.top_k == 0 {
            return fail("top_k must be positive".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.e_layers == 0 || self.d_ff == 0 {
            return fail("e_layers and d_ff must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0) || !(self.layer_norm_eps > 0.0) {
            return fail("learning_rate and layer_norm_eps must be positive".into());
        }
        let total = self.train_fraction + self.val_fraction + self.test_fraction;
        if (total - 1.0).abs() > 1e-9 {
            return fail(format!("split fractions sum to {total}, expected 1"));
        }
        Ok(())
    }
}
