use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters of the decoder-only transformer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub n_layers: usize,
    /// Size of the learned position table; positions are indexed from 1.
    pub max_positions: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// A desk-sized default with a 256-position window.
    pub fn desk(vocab_size: usize, seed: u64) -> Self {
        Self { vocab_size, d_model: 64, n_heads: 4, d_head: 16, n_layers: 2, max_positions: 256, seed }
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.vocab_size == 0 {
            return fail("vocab_size must be positive".into());
        }
        if self.n_heads == 0 || self.d_head == 0 {
            return fail("n_heads and d_head must be positive".into());
        }
        if self.d_model != self.n_heads * self.d_head {
            return fail(format!("d_model {} != n_heads {} x d_head {}", self.d_model, self.n_heads, self.d_head));
        }
        if self.n_layers == 0 {
            return fail("n_layers must be positive".into());
        }
        if self.max_positions < 2 {
            return fail(format!("max_positions {} < 2", self.max_positions));
        }
        Ok(())
    }
}
