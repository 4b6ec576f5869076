//! Model hyper-parameters and their validation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    /// Width of the key/value projections; every query head has its own KV head.
    pub kv_dim: usize,
    /// Hidden width of the gated MLP. Defaults to `4 * model_dim`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp_dim: Option<usize>,
    pub vocab_size: usize,
    pub patch_size: usize,
    /// Side length in pixels of the square grayscale images the encoder accepts.
    pub image_side: usize,
    pub tokens_per_image: usize,
    pub rope_base: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// A small configuration used by tests and examples: 16x16 images, 16 tokens each.
    pub fn tiny(num_layers: usize, seed: u64) -> Self {
        Self {
            num_layers,
            num_heads: 2,
            model_dim: 32,
            kv_dim: 32,
            mlp_dim: None,
            vocab_size: 64,
            patch_size: 4,
            image_side: 16,
            tokens_per_image: 16,
            rope_base: 10_000.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("model_dim", self.model_dim),
            ("kv_dim", self.kv_dim),
            ("vocab_size", self.vocab_size),
            ("patch_size", self.patch_size),
            ("image_side", self.image_side),
            ("tokens_per_image", self.tokens_per_image),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.mlp_dim == Some(0) {
            return Err(Error::Config("mlp_dim must be positive".into()));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.kv_dim % self.num_heads != 0 || (self.kv_dim / self.num_heads) % 2 != 0 {
            return Err(Error::Config(format!(
                "kv_dim {} must split into {} heads of even width",
                self.kv_dim, self.num_heads
            )));
        }
        if self.image_side % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_side {} is not divisible by patch_size {}",
                self.image_side, self.patch_size
            )));
        }
        let per_side = self.image_side / self.patch_size;
        if per_side * per_side != self.tokens_per_image {
            return Err(Error::Config(format!(
                "tokens_per_image {} disagrees with (image_side / patch_size)^2 = {}",
                self.tokens_per_image,
                per_side * per_side
            )));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return Err(Error::Config("rope_base must be a positive real".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.kv_dim / self.num_heads
    }

    pub fn encoder_head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.mlp_dim.unwrap_or(4 * self.model_dim)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indivisible_heads() {
        let mut cfg = ModelConfig::tiny(4, 7);
        cfg.model_dim = 30;
        cfg.num_heads = 4;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_token_count_mismatch() {
        let mut cfg = ModelConfig::tiny(4, 7);
        cfg.tokens_per_image = 15;
        assert!(cfg.validate().is_err());
        cfg.tokens_per_image = 16;
        cfg.image_side = 18;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ModelConfig::tiny(3, 11);
        let back = ModelConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let s = ModelConfig::tiny(2, 1).to_toml_string() + "bogus = 3\n";
        assert!(ModelConfig::from_toml_str(&s).is_err());
    }
}
