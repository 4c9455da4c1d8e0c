// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How many residual writers the `1/√N` init scaling counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResidualCount {
    /// Two writers per block (attention and MLP): `N = 2·n_layer`.
    #[default]
    Writers,
    /// One per block: `N = n_layer`.
    Blocks,
}

fn default_ln_eps() -> f64 {
    1e-5
}

/// Architecture hyperparameters of the decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layer: usize,
    pub n_head: usize,
    pub d_model: usize,
    pub n_ctx: usize,
    pub vocab_size: usize,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
    #[serde(default)]
    pub residual_count: ResidualCount,
}

impl ModelConfig {
    /// Four layers, four heads, width 64: trains in minutes on a CPU.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            n_layer: 4,
            n_head: 4,
            d_model: 64,
            n_ctx: 64,
            vocab_size,
            ln_eps: 1e-5,
            residual_count: ResidualCount::Writers,
        }
    }

    /// GPT-2 small shape. Only used for parameter counting.
    pub fn gpt2_small() -> Self {
        Self {
            n_layer: 12,
            n_head: 12,
            d_model: 768,
            n_ctx: 1024,
            vocab_size: 50257,
            ln_eps: 1e-5,
            residual_count: ResidualCount::Writers,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_head
    }

    pub fn d_mlp(&self) -> usize {
        4 * self.d_model
    }

    pub fn residual_layers(&self) -> usize {
        match self.residual_count {
            ResidualCount::Writers => 2 * self.n_layer,
            ResidualCount::Blocks => self.n_layer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_layer == 0 || self.n_head == 0 || self.d_model == 0 {
            return bad("n_layer, n_head and d_model must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_head) {
            return bad(format!(
                "d_model {} is not divisible by n_head {}",
                self.d_model, self.n_head
            ));
        }
        if self.n_ctx == 0 || self.vocab_size == 0 {
            return bad("n_ctx and vocab_size must be positive".into());
        }
        if !(self.ln_eps > 0.0) {
            return bad(format!("ln_eps must be > 0, got {}", self.ln_eps));
        }
        Ok(())
    }

    /// Parameter count of this architecture, without allocating anything.
    /// The unembedding is tied and not counted twice.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let embed = self.vocab_size * d + self.n_ctx * d;
        let ln = 2 * d;
        let attn = 3 * d * d + d * d + d;
        let mlp = d * self.d_mlp() + self.d_mlp() + self.d_mlp() * d + d;
        embed + self.n_layer * (2 * ln + attn + mlp) + ln
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gpt2_small_count_is_about_124m() {
        let n = ModelConfig::gpt2_small().parameter_count() as f64;
        assert!((n / 124.4e6 - 1.0).abs() < 0.01, "{n}");
    }

    #[test]
    fn validation() {
        let mut c = ModelConfig::desk(50);
        assert!(c.validate().is_ok());
        assert_eq!(c.d_head(), 16);
        assert_eq!(c.d_mlp(), 256);
        assert_eq!(c.residual_layers(), 8);
        c.n_head = 5;
        assert!(c.validate().is_err());
    }
}
