use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the encoder and the cross-attention decoder.
///
/// `max_len` defaults to 512 tokens at desk scale; long clinical notes are
/// usually truncated around 6000 tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub heads: usize,
    pub classes: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 2000,
            embed_dim: 32,
            encoder_layers: 2,
            heads: 2,
            classes: 10,
            max_len: 512,
            dropout: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.classes == 0 || self.embed_dim == 0 || self.heads == 0 {
            return Err(Error::Config(
                "vocab_size, classes, embed_dim and heads must be positive".into(),
            ));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.max_len < 3 {
            return Err(Error::Config(format!("max_len must be at least 3, got {}", self.max_len)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn ff_dim(&self) -> usize {
        4 * self.embed_dim
    }
}
