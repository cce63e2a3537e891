use crate::error::{Result, WiseError};
use serde::{Deserialize, Serialize};

/// Architecture of the tiny decoder-only transformer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    /// Block whose FFN value matrix is edited.
    pub edit_layer: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 64,
            d_ffn: 256,
            n_layers: 4,
            n_heads: 4,
            max_seq_len: 64,
            edit_layer: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(WiseError::Config(msg));
        if self.vocab_size == 0 || self.d_model == 0 || self.d_ffn == 0 || self.max_seq_len == 0 {
            return bad("model dimensions must be positive".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.edit_layer >= self.n_layers {
            return bad(format!(
                "edit_layer {} out of range for {} layers",
                self.edit_layer, self.n_layers
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_bad_heads_and_layer() {
        let mut c = ModelConfig {
            n_heads: 3,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c.n_heads = 4;
        c.edit_layer = 4;
        assert!(c.validate().is_err());
    }
}
