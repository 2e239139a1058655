use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::encodings::{temporal_split, EncodingConfig, DEFAULT_BASE, REFERENCE_YEAR};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Uniform over all `T·G·cells` tokens.
    #[default]
    Independent,
    /// One spatial/spectral mask shared by every timestep.
    ConsistentAcrossTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub token_size: usize,
    pub bands: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub mask_ratio: f64,
    pub timesteps: usize,
    pub norm_pix: bool,
    pub spectral_groups: usize,
    pub mask_mode: MaskMode,
    pub reference_year: i32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            token_size: 4,
            bands: 11,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            decoder_dim: 512,
            decoder_depth: 4,
            decoder_heads: 8,
            mask_ratio: 0.75,
            timesteps: 1,
            norm_pix: true,
            spectral_groups: 1,
            mask_mode: MaskMode::Independent,
            reference_year: REFERENCE_YEAR,
        }
    }
}

impl ModelConfig {
    /// Gradient-check scale: 8×8 images, 3 bands, d = 16, two blocks.
    pub fn toy() -> Self {
        ModelConfig {
            image_size: 8,
            bands: 3,
            embed_dim: 16,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            decoder_dim: 16,
            decoder_depth: 1,
            decoder_heads: 2,
            ..Self::default()
        }
    }

    /// Desk-scale model on full 32×32×11 patches.
    pub fn small() -> Self {
        ModelConfig {
            embed_dim: 48,
            depth: 2,
            heads: 4,
            mlp_ratio: 2,
            decoder_dim: 24,
            decoder_depth: 1,
            decoder_heads: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.token_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.token_size) {
            return bad(format!("image_size {} not divisible by token_size {}", self.image_size, self.token_size));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad(format!("mask_ratio {} outside (0, 1)", self.mask_ratio));
        }
        for (name, d, h) in [
            ("embed_dim", self.embed_dim, self.heads),
            ("decoder_dim", self.decoder_dim, self.decoder_heads),
        ] {
            if h == 0 || d % h != 0 {
                return bad(format!("{name} {d} not divisible by {h} heads"));
            }
            if d % 4 != 0 {
                return bad(format!("{name} {d} must be divisible by 4"));
            }
            temporal_split(d)?;
        }
        if self.timesteps == 0 {
            return bad("timesteps must be >= 1".into());
        }
        if self.spectral_groups == 0 || self.spectral_groups > self.bands {
            return bad(format!("spectral_groups {} must be in 1..={}", self.spectral_groups, self.bands));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.token_size
    }

    pub fn cells(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Pixel values per band within one token.
    pub fn token_area(&self) -> usize {
        self.token_size * self.token_size
    }

    pub fn tokens_per_step(&self) -> usize {
        self.spectral_groups * self.cells()
    }

    /// Tokens seen by the encoder before masking.
    pub fn n_tokens(&self) -> usize {
        self.timesteps * self.tokens_per_step()
    }

    /// Length of one patchified row: all bands of a spatial cell.
    pub fn row_len(&self) -> usize {
        self.bands * self.token_area()
    }

    /// Contiguous, near-equal band ranges, larger groups first.
    pub fn band_groups(&self) -> Vec<Range<usize>> {
        let g = self.spectral_groups;
        let (q, r) = (self.bands / g, self.bands % g);
        let mut start = 0;
        (0..g)
            .map(|i| {
                let len = q + usize::from(i < r);
                let range = start..start + len;
                start += len;
                range
            })
            .collect()
    }

    pub fn encoding(&self, d: usize) -> EncodingConfig {
        EncodingConfig {
            embed_dim: d,
            base_frequency: DEFAULT_BASE,
            reference_year: self.reference_year,
            spectral_groups: self.spectral_groups,
        }
    }
}
