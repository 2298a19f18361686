use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Applied to attention probabilities and the FFN hidden layer in train mode.
    pub dropout: f64,
    /// Tie the input embedding and the output projection.
    pub share_embedding: bool,
    pub activation: Activation,
    pub ln_eps: f64,
}

impl ModelConfig {
    /// Default architecture: d = 64, two blocks, one head, d_ff = d.
    pub fn new(vocab_size: usize, max_len: usize) -> Self {
        ModelConfig {
            vocab_size,
            max_len,
            d_model: 64,
            n_blocks: 2,
            n_heads: 1,
            d_ff: 64,
            dropout: 0.2,
            share_embedding: true,
            activation: Activation::Gelu,
            ln_eps: 1e-5,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.vocab_size == 0 || self.max_len == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad(format!("dimensions must be positive: {self:?}"));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "n_heads {} must divide d_model {}",
                self.n_heads, self.d_model
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if !(self.ln_eps > 0.0) {
            return bad("ln_eps must be positive".into());
        }
        Ok(())
    }
}
