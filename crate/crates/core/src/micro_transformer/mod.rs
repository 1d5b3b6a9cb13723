// SPDX-License-Identifier: MIT OR Apache-2.0

//! A desk-scale decoder-only transformer with activation taps and LoRA.
//!
//! The block structure follows the usual pre-norm recipe: RMS norm, rotary
//! causal self-attention with `q/k/v/o` projections, RMS norm, and a gated
//! SiLU MLP with `gate/up/down` projections. All arithmetic is `f64`.
//!
//! Three taps are captured at the final token of every forward pass:
//! per-head attention outputs before `o` mixes them, the residual after the
//! attention addition, and the residual after the MLP addition.

mod checkpoint;
mod linear;
mod model;
mod tokenizer;
mod train;

pub use checkpoint::{load_adapters, load_model, save_adapters, save_model, MODEL_MAGIC};
pub use linear::{LoraAdapter, ProjectionLinear};
pub use model::{AdapterGrads, Classification, Label, Model, TapBundle};
pub use tokenizer::{
    format_prompt, render_prompt, template_token_count, PromptTokens, BOS_TOKEN, HIGH_TOKEN, LOW_TOKEN,
    MIN_VOCAB, SYSTEM_PROMPT, SYSTEM_TOKEN, USER_PREFIX, USER_SUFFIX, USER_TOKEN,
};
pub use train::{lr_at, train_lora, TrainReport};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    #[default]
    Rms,
}

/// Transformer hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub model_dim: usize,
    pub mlp_hidden_dim: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    pub norm: NormKind,
    pub rope_base: f64,
    pub norm_eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 6,
            n_heads: 8,
            model_dim: 128,
            mlp_hidden_dim: 256,
            vocab_size: MIN_VOCAB,
            max_context: 384,
            norm: NormKind::Rms,
            rope_base: 10_000.0,
            norm_eps: 1e-6,
            seed: crate::seed::DEFAULT_SEED,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("model_dim", self.model_dim),
            ("mlp_hidden_dim", self.mlp_hidden_dim),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if self.model_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config("rotary encoding needs an even head_dim".into()));
        }
        if self.max_context < 8 {
            return Err(Error::Config("max_context must be >= 8".into()));
        }
        if self.vocab_size < MIN_VOCAB {
            return Err(Error::Config(format!(
                "vocab_size must cover the byte tokenizer ({MIN_VOCAB})"
            )));
        }
        if !(self.rope_base > 0.0 && self.norm_eps > 0.0) {
            return Err(Error::Config("rope_base and norm_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Which projection a LoRA adapter wraps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoraTarget {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 7] = [
        LoraTarget::Q,
        LoraTarget::K,
        LoraTarget::V,
        LoraTarget::O,
        LoraTarget::Gate,
        LoraTarget::Up,
        LoraTarget::Down,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LoraTarget::Q => "q",
            LoraTarget::K => "k",
            LoraTarget::V => "v",
            LoraTarget::O => "o",
            LoraTarget::Gate => "gate",
            LoraTarget::Up => "up",
            LoraTarget::Down => "down",
        }
    }
}

impl fmt::Display for LoraTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LoraTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LoraTarget::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == s || format!("{}_proj", t.as_str()) == s)
            .ok_or_else(|| Error::Config(format!("unknown LoRA target `{s}`")))
    }
}

/// Adapter hyperparameters. Defaults: rank 8, alpha 32, dropout 0.1, all
/// seven projections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub targets: Vec<LoraTarget>,
    pub seed: u64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 8,
            alpha: 32.0,
            dropout: 0.1,
            targets: LoraTarget::ALL.to_vec(),
            seed: crate::seed::DEFAULT_SEED,
        }
    }
}

impl LoraConfig {
    /// `alpha / rank`.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be >= 1".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config("LoRA alpha must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("LoRA dropout must lie in [0, 1)".into()));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("LoRA needs at least one target".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    #[default]
    CosineWithLinearWarmup,
}

/// Fine-tuning loop settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_fraction: f64,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 10,
            warmup_fraction: 0.1,
            schedule: LrSchedule::CosineWithLinearWarmup,
            seed: crate::seed::DEFAULT_SEED,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.head_dim(), 16);
        assert_eq!(cfg.n_heads * cfg.head_dim(), cfg.model_dim);
    }

    #[test]
    fn invalid_configs() {
        let bad = ModelConfig {
            n_heads: 3,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            max_context: 7,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(LoraConfig {
            dropout: 1.0,
            ..LoraConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            warmup_fraction: 1.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn lora_defaults() {
        let cfg = LoraConfig::default();
        assert_eq!(cfg.rank, 8);
        assert_eq!(cfg.alpha, 32.0);
        assert_eq!(cfg.scale(), 4.0);
        assert_eq!(cfg.targets.len(), 7);
        assert_eq!("gate_proj".parse::<LoraTarget>().unwrap(), LoraTarget::Gate);
    }
}
