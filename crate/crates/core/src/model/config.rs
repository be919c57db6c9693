use serde::{Deserialize, Serialize};

use super::{ModelError, Result};

fn default_rope_base() -> f64 {
    10_000.0
}

/// Hyperparameters of the toy denoiser.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub mask_token_id: u32,
    pub max_positions: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    pub weight_seed: u64,
    /// Output row `p` predicts token `p + 1` (models adapted from
    /// autoregressive checkpoints).
    #[serde(default)]
    pub shifted_output: bool,
}

impl ModelConfig {
    /// 4 layers, 4 heads, d_model 128, vocab 512.
    pub fn toy() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_head: 32,
            d_ff: 256,
            vocab_size: 512,
            mask_token_id: 511,
            max_positions: 1024,
            rope_base: default_rope_base(),
            weight_seed: 7,
            shifted_output: false,
        }
    }

    /// A very small model for fast unit tests.
    pub fn tiny() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_head: 8,
            d_ff: 32,
            vocab_size: 32,
            mask_token_id: 31,
            max_positions: 256,
            rope_base: default_rope_base(),
            weight_seed: 7,
            shifted_output: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(ModelError::InvalidConfig(msg));
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ] {
            if v == 0 {
                return fail(format!("{name} must be >= 1"));
            }
        }
        if self.d_model != self.n_heads * self.d_head {
            return fail(format!(
                "d_model ({}) must equal n_heads * d_head ({} * {})",
                self.d_model, self.n_heads, self.d_head
            ));
        }
        if !self.d_head.is_multiple_of(2) {
            return fail(format!("d_head ({}) must be even for rotary pairs", self.d_head));
        }
        if self.mask_token_id as usize >= self.vocab_size {
            return fail(format!(
                "mask_token_id ({}) must be < vocab_size ({})",
                self.mask_token_id, self.vocab_size
            ));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return fail(format!("rope_base ({}) must be positive", self.rope_base));
        }
        Ok(())
    }

    /// Multiply-accumulates for one query row against `seq_len` keys: the
    /// four attention projections, the feed-forward pair, QK and AV products
    /// across all layers, plus the output head.
    pub fn macs_per_row(&self, seq_len: usize) -> u64 {
        let d = self.d_model as u64;
        let per_layer = 4 * d * d + 2 * d * self.d_ff as u64 + 2 * seq_len as u64 * d;
        self.n_layers as u64 * per_layer + d * self.vocab_size as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        ModelConfig::toy().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn reports_failed_invariant() {
        let mut c = ModelConfig::toy();
        c.d_head = 31;
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("d_model"), "{err}");

        let mut c = ModelConfig::toy();
        c.n_heads = 8;
        c.d_head = 15;
        c.d_model = 120;
        assert!(c.validate().unwrap_err().to_string().contains("even"));

        let mut c = ModelConfig::toy();
        c.mask_token_id = 512;
        assert!(c.validate().unwrap_err().to_string().contains("mask_token_id"));

        let mut c = ModelConfig::toy();
        c.n_layers = 0;
        assert!(c.validate().unwrap_err().to_string().contains("n_layers"));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut v = serde_json::to_value(ModelConfig::tiny()).unwrap();
        v["n_layer"] = 3.into();
        let err = serde_json::from_value::<ModelConfig>(v).unwrap_err().to_string();
        assert!(err.contains("n_layer"), "{err}");
    }
}
