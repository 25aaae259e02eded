use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub enc_depth: usize,
    pub dec_depth: usize,
    pub enc_dim: usize,
    pub dec_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            enc_depth: 4,
            dec_depth: 2,
            enc_dim: 128,
            dec_dim: 64,
            heads: 4,
            mlp_ratio: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// One block per side, width 8: small enough for f64 finite differences.
    pub fn micro(image_size: usize, patch_size: usize) -> Self {
        Self {
            image_size,
            patch_size,
            enc_depth: 1,
            dec_depth: 1,
            enc_dim: 8,
            dec_dim: 8,
            heads: 2,
            mlp_ratio: 4,
            seed: 0,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || !self.enc_dim.is_multiple_of(self.heads) || !self.dec_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "enc_dim {} and dec_dim {} must be divisible by heads {}",
                self.enc_dim, self.dec_dim, self.heads
            ));
        }
        if !self.enc_dim.is_multiple_of(4) || !self.dec_dim.is_multiple_of(4) {
            return bad("embedding widths must be multiples of 4 for 2-D sinusoidal positions".into());
        }
        if self.enc_depth == 0 || self.dec_depth == 0 || self.mlp_ratio == 0 {
            return bad("depths and mlp_ratio must be positive".into());
        }
        Ok(())
    }
}
