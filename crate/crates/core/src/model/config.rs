use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqdata::{AUDIO_VOCAB, N_Q, TEXT_VOCAB};

/// Architecture of the two-level transformer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub global_layers: usize,
    pub global_dim: usize,
    pub global_heads: usize,
    pub global_ffn: usize,
    pub local_layers: usize,
    pub local_dim: usize,
    pub local_heads: usize,
    pub local_ffn: usize,
    pub text_vocab: usize,
    pub audio_vocab: usize,
    pub n_q: usize,
    /// Longest spliced sequence, and the size of each per-segment position
    /// table.
    pub max_rows: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            global_layers: 4,
            global_dim: 128,
            global_heads: 4,
            global_ffn: 512,
            local_layers: 2,
            local_dim: 64,
            local_heads: 2,
            local_ffn: 256,
            text_vocab: TEXT_VOCAB,
            audio_vocab: AUDIO_VOCAB,
            n_q: N_Q,
            max_rows: 64,
        }
    }
}

impl ModelConfig {
    /// Small preset that trains the synthetic task in about a minute on one
    /// core.
    pub fn compact() -> Self {
        Self {
            global_layers: 2,
            global_dim: 48,
            global_heads: 4,
            global_ffn: 128,
            local_layers: 1,
            local_dim: 32,
            local_heads: 2,
            local_ffn: 64,
            ..Self::default()
        }
    }

    /// Roughly ten thousand parameters; used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            global_layers: 2,
            global_dim: 16,
            global_heads: 2,
            global_ffn: 32,
            local_layers: 1,
            local_dim: 8,
            local_heads: 2,
            local_ffn: 16,
            max_rows: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("global_layers", self.global_layers),
            ("global_dim", self.global_dim),
            ("global_heads", self.global_heads),
            ("global_ffn", self.global_ffn),
            ("local_layers", self.local_layers),
            ("local_dim", self.local_dim),
            ("local_heads", self.local_heads),
            ("local_ffn", self.local_ffn),
            ("text_vocab", self.text_vocab),
            ("audio_vocab", self.audio_vocab),
            ("n_q", self.n_q),
            ("max_rows", self.max_rows),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{name}"), "must be positive"));
            }
        }
        if self.global_dim % self.global_heads != 0 {
            return Err(Error::config(
                "model.global_heads",
                format!("global_dim {} not divisible by {}", self.global_dim, self.global_heads),
            ));
        }
        if self.local_dim % self.local_heads != 0 {
            return Err(Error::config(
                "model.local_heads",
                format!("local_dim {} not divisible by {}", self.local_dim, self.local_heads),
            ));
        }
        if self.audio_vocab < 2 {
            return Err(Error::config("model.audio_vocab", "need at least 2 codes"));
        }
        Ok(())
    }

    pub fn eos_code(&self) -> u32 {
        (self.audio_vocab - 1) as u32
    }
}
