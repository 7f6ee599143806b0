use serde::{Deserialize, Serialize};

use crate::data_synth::vocab::NUM_RESERVED;
use crate::error::{Error, Result};

/// Architecture hyperparameters shared by the encoders, decoder and prompt banks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub ffn_width: usize,
    pub vocab_size: usize,
    /// Maximum number of generated tokens, `eos` included.
    pub max_title_len: usize,
    pub max_input_len: usize,
    pub image_feature_dim: usize,
    pub image_seq_len: usize,
    /// Prompts per bank.
    pub n_prompts: usize,
    pub dropout: f64,
    /// Multiplier on prompt-to-prompt dot products inside cycle alignment.
    #[serde(default = "default_align_scale")]
    pub align_scale: f64,
}

fn default_align_scale() -> f64 {
    1.0
}

impl ModelConfig {
    /// Full-width configuration: d = 512, 16 prompts per bank, six layers.
    pub fn paper_scale(vocab_size: usize, image_feature_dim: usize, image_seq_len: usize) -> Self {
        ModelConfig {
            d: 512,
            n_heads: 8,
            n_enc_layers: 6,
            n_dec_layers: 6,
            ffn_width: 2048,
            vocab_size,
            max_title_len: 32,
            max_input_len: 64,
            image_feature_dim,
            image_seq_len,
            n_prompts: 16,
            dropout: 0.1,
            align_scale: 1.0,
        }
    }

    /// Desk-scale configuration: d = 64, 8 prompts per bank, two layers.
    pub fn desk(vocab_size: usize, image_feature_dim: usize, image_seq_len: usize) -> Self {
        ModelConfig {
            d: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            ffn_width: 128,
            vocab_size,
            max_title_len: 16,
            max_input_len: 24,
            image_feature_dim,
            image_seq_len,
            n_prompts: 8,
            dropout: 0.1,
            align_scale: 1.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_heads == 0 || !self.d.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "model width {} must be a positive multiple of n_heads {}",
                self.d, self.n_heads
            )));
        }
        if self.n_prompts == 0 {
            return Err(Error::Config("n_prompts must be at least 1".into()));
        }
        if self.vocab_size < NUM_RESERVED {
            return Err(Error::Config(format!(
                "vocab_size {} does not cover the {NUM_RESERVED} reserved ids",
                self.vocab_size
            )));
        }
        if self.image_seq_len == 0 || self.image_feature_dim == 0 {
            return Err(Error::Config("image input must be non-empty".into()));
        }
        if self.max_title_len == 0 || self.max_input_len == 0 || self.ffn_width == 0 {
            return Err(Error::Config(
                "lengths and ffn width must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if !self.align_scale.is_finite() {
            return Err(Error::Config("align_scale must be finite".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::paper_scale(100, 32, 4).validate().unwrap();
        ModelConfig::desk(100, 32, 4).validate().unwrap();
        assert_eq!(ModelConfig::paper_scale(100, 32, 4).d, 512);
        assert_eq!(ModelConfig::paper_scale(100, 32, 4).n_prompts, 16);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut c = ModelConfig::desk(100, 32, 4);
        c.n_heads = 5;
        assert!(c.validate().is_err());
        c.n_heads = 4;
        c.vocab_size = 3;
        assert!(c.validate().is_err());
    }
}
