use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::vocab::VOCAB_SIZE;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Alm,
    Mlm,
}

impl Arch {
    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Alm => "alm",
            Arch::Mlm => "mlm",
        }
    }

    pub fn is_causal(self) -> bool {
        self == Arch::Alm
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "alm" => Ok(Arch::Alm),
            "mlm" => Ok(Arch::Mlm),
            other => Err(Error::config(format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_vocab() -> usize {
    VOCAB_SIZE
}

impl ModelConfig {
    /// d_model 128, 2 layers, 4 heads, d_ff 512, 256 positions.
    pub fn desk(arch: Arch, seed: u64) -> Self {
        ModelConfig {
            arch,
            vocab_size: VOCAB_SIZE,
            d_model: 128,
            n_layers: 2,
            n_heads: 4,
            d_ff: 512,
            max_positions: 256,
            dropout: 0.1,
            seed,
        }
    }

    /// GPT-2-small / RoBERTa-base shapes.
    pub fn reference(arch: Arch, seed: u64) -> Self {
        ModelConfig {
            arch,
            vocab_size: VOCAB_SIZE,
            d_model: 768,
            n_layers: 12,
            n_heads: 12,
            d_ff: 3072,
            max_positions: 512,
            dropout: 0.1,
            seed,
        }
    }

    pub fn tiny(arch: Arch, seed: u64) -> Self {
        ModelConfig {
            arch,
            vocab_size: VOCAB_SIZE,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_positions: 32,
            dropout: 0.0,
            seed,
        }
    }

    pub fn with_dropout(mut self, dropout: f64) -> Self {
        self.dropout = dropout;
        self
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_positions", self.max_positions),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size < VOCAB_SIZE {
            return Err(Error::config(format!("vocab_size must be at least {VOCAB_SIZE}")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip_norm: f64,
    #[serde(default = "default_mask_rate")]
    pub mask_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_mask_rate() -> f64 {
    0.15
}

fn default_log_every() -> usize {
    100
}

impl TrainConfig {
    pub fn desk(arch: Arch, seed: u64) -> Self {
        let (adam_beta2, adam_eps) = match arch {
            Arch::Alm => (0.95, 1e-8),
            Arch::Mlm => (0.98, 1e-6),
        };
        TrainConfig {
            steps: 3000,
            batch_size: 64,
            lr: 3e-4,
            warmup_steps: 200,
            weight_decay: 0.1,
            adam_beta1: 0.9,
            adam_beta2,
            adam_eps,
            grad_clip_norm: 1.0,
            mask_rate: 0.15,
            seed,
            log_every: 100,
        }
    }

    /// 8,192 sequences per batch for 100k steps.
    pub fn reference(arch: Arch, seed: u64) -> Self {
        TrainConfig {
            steps: 100_000,
            batch_size: 8192,
            lr: 6e-4,
            warmup_steps: 10_000,
            ..TrainConfig::desk(arch, seed)
        }
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn validate(&self, arch: Arch) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1)")));
            }
        }
        if self.adam_eps <= 0.0 {
            return Err(Error::config("adam_eps must be positive"));
        }
        if self.grad_clip_norm <= 0.0 {
            return Err(Error::config("grad_clip_norm must be positive"));
        }
        if arch == Arch::Mlm && !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::config(
                "mask_rate must lie strictly between 0 and 1 for masked training",
            ));
        }
        Ok(())
    }
}
