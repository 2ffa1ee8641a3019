//! Experiment configuration: a TOML file with `[backbone]`, `[key]`,
//! `[train]`, `[eval]` and `[attack]` sections plus top-level `seed` and
//! `out_dir`. Every field has a default, so an empty file is a valid
//! desk-scale experiment. The canonical re-serialization is hashed and
//! embedded in every artifact; mismatched checkpoints are refused.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::features::FeatureSpec;
use crate::generator::{BackboneConfig, KeyLayoutConfig};
use crate::tensor::EngineError;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EarlyStopConfig {
    pub enabled: bool,
    pub min_steps: usize,
    pub eval_interval: usize,
    pub eval_samples: usize,
    pub bit_acc: f32,
    pub psnr: f32,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            min_steps: 600,
            eval_interval: 150,
            eval_samples: 24,
            bit_acc: 0.995,
            psnr: 29.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Imperceptibility weight.
    pub lambda: f32,
    pub lr: f32,
    /// Adapter-bank learning rate multiplier on top of `lr`. The bank
    /// starts from a zero-signal state and needs larger steps than the
    /// extractor to leave it.
    pub bank_lr_mult: f32,
    /// The effective imperceptibility weight ramps linearly from 0 to
    /// `lambda` over this many steps, letting the watermark signal form
    /// before it is traded against visibility.
    pub lambda_warmup_steps: usize,
    /// Augmentations are identity for this many steps before the full
    /// battery is sampled.
    pub aug_warmup_steps: usize,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    /// Draw augmentations inside the verifiability loss.
    pub augment: bool,
    pub features: FeatureSpec,
    pub checkpoint_interval: usize,
    pub log_every: usize,
    pub early_stop: EarlyStopConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 4,
            lambda: 1.0,
            lr: 1e-3,
            bank_lr_mult: 10.0,
            lambda_warmup_steps: 300,
            aug_warmup_steps: 300,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            augment: true,
            features: FeatureSpec::default(),
            checkpoint_interval: 500,
            log_every: 10,
            early_stop: EarlyStopConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Probe pairs used for clean bit accuracy / PSNR evaluations.
    pub clean_probes: usize,
    pub fpr_target: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { clean_probes: 64, fpr_target: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    /// Images evaluated per battery entry.
    pub images: usize,
    pub pgd_steps: usize,
    pub pgd_epsilons: Vec<f32>,
    pub averaging_k: Vec<usize>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            images: 32,
            pgd_steps: 100,
            pgd_epsilons: vec![1e-3, 1e-2, 1e-1],
            averaging_k: vec![5, 10, 20, 50, 100, 200, 500, 1000],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: String,
    pub backbone: BackboneConfig,
    pub key: KeyLayoutConfig,
    /// Channel widths of the extractor trunk.
    pub extractor_channels: Vec<usize>,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub attack: AttackConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            out_dir: "runs/default".into(),
            backbone: BackboneConfig::default(),
            key: KeyLayoutConfig::default(),
            extractor_channels: vec![16, 32, 64, 64],
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            attack: AttackConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let cfg: Self = toml::from_str(&text)?;
        cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        self.backbone.validate()?;
        if !self.key.paths.is_power_of_two() || self.key.paths < 2 {
            return Err(EngineError::Invalid(format!(
                "key.paths = {} must be a power of two >= 2",
                self.key.paths
            )));
        }
        if self.extractor_channels.is_empty() {
            return Err(EngineError::Invalid("extractor_channels may not be empty".into()));
        }
        if self.train.batch_size == 0 {
            return Err(EngineError::Invalid("train.batch_size must be positive".into()));
        }
        if self.train.lambda < 0.0 {
            return Err(EngineError::Invalid("train.lambda must be >= 0".into()));
        }
        if !(0.0 < self.eval.fpr_target && self.eval.fpr_target < 1.0) {
            return Err(EngineError::Invalid("eval.fpr_target must be in (0, 1)".into()));
        }
        Ok(())
    }

    /// Key capacity M implied by the routing layout.
    pub fn key_bits(&self) -> usize {
        let blocks = if self.key.routed_blocks.is_empty() {
            self.backbone.blocks
        } else {
            self.key.routed_blocks.len()
        };
        let units = blocks * if self.key.per_conv { 2 } else { 1 };
        units * self.key.paths.trailing_zeros() as usize
    }

    /// FNV-1a over the canonical form of every field that defines the
    /// trained artifact: seed, architecture, routing layout and training
    /// dynamics. Scheduling knobs (step budget, checkpoint cadence, early
    /// stop, logging) are excluded so a checkpoint can be resumed with an
    /// extended budget.
    pub fn config_hash(&self) -> u64 {
        let t = &self.train;
        let canonical = format!(
            "seed={};backbone={:?};key={:?};ext={:?};lambda={};lr={};bankmult={};lwarm={};awarm={};wd={};b1={};b2={};batch={};aug={};features={:?}",
            self.seed,
            self.backbone,
            self.key,
            self.extractor_channels,
            t.lambda,
            t.lr,
            t.bank_lr_mult,
            t.lambda_warmup_steps,
            t.aug_warmup_steps,
            t.weight_decay,
            t.beta1,
            t.beta2,
            t.batch_size,
            t.augment,
            t.features,
        );
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in canonical.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_default_experiment() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.key_bits(), 16);
    }

    #[test]
    fn sections_override_defaults() {
        let cfg = ExperimentConfig::from_toml(
            r#"
seed = 7
[backbone]
blocks = 14
[key]
paths = 4
[train]
steps = 100
lambda = 2.5
"#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.backbone.blocks, 14);
        assert_eq!(cfg.train.steps, 100);
        assert_eq!(cfg.key_bits(), 28);
        assert!((cfg.train.lambda - 2.5).abs() < 1e-6);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(ExperimentConfig::from_toml("[key]\npaths = 3").is_err());
        assert!(ExperimentConfig::from_toml("[train]\nbatch_size = 0").is_err());
        assert!(ExperimentConfig::from_toml("[backbone]\nimage_size = 33").is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::default();
        let mut b = ExperimentConfig::default();
        assert_eq!(a.config_hash(), b.config_hash());
        // Schedule knobs do not change the artifact identity.
        b.train.steps = 9999;
        b.train.early_stop.enabled = false;
        assert_eq!(a.config_hash(), b.config_hash());
        b.seed = 43;
        assert_ne!(a.config_hash(), b.config_hash());
        b.seed = a.seed;
        b.train.lambda = 2.0;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn per_conv_and_p8_capacity_variants() {
        let mut cfg = ExperimentConfig::default();
        cfg.key.per_conv = true;
        assert_eq!(cfg.key_bits(), 32);
        cfg.key.per_conv = false;
        cfg.key.paths = 8;
        assert_eq!(cfg.key_bits(), 24);
        cfg.key.routed_blocks = vec![0, 2, 4];
        assert_eq!(cfg.key_bits(), 9);
    }
}
