use crate::error::{Error, Result};

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Height and width of the square input image.
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    /// Token width `D` of the ViT encoder.
    pub dim: usize,
    pub heads: usize,
    pub vit_layers: usize,
    pub num_expert: usize,
    /// Width `D_B` of the bilinear blocks; also the word-embedding width.
    pub bilinear_dim: usize,
    /// Intermediate width `D_mid` of the spatial/channel attention branch.
    pub mid_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub vocab_size: usize,
    pub t_max: usize,
    pub use_bilinear_encoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: 3,
            patch: 16,
            dim: 64,
            heads: 4,
            vit_layers: 2,
            num_expert: 7,
            bilinear_dim: 64,
            mid_dim: 32,
            enc_layers: 2,
            dec_layers: 2,
            vocab_size: 22,
            t_max: 48,
            use_bilinear_encoder: true,
        }
    }
}

impl ModelConfig {
    /// A configuration whose every tensor extent is at most 8.
    pub fn tiny() -> Self {
        Self {
            image_size: 4,
            channels: 2,
            patch: 2,
            dim: 2,
            heads: 2,
            vit_layers: 1,
            num_expert: 3,
            bilinear_dim: 4,
            mid_dim: 3,
            enc_layers: 1,
            dec_layers: 2,
            vocab_size: 8,
            t_max: 6,
            use_bilinear_encoder: true,
        }
    }

    /// Visual tokens per image, `HW / P^2`.
    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch) {
            return bad(format!(
                "image size {} must be a positive multiple of patch {}",
                self.image_size, self.patch
            ));
        }
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} must be divisible by heads {}", self.dim, self.heads));
        }
        if self.num_expert == 0 {
            return bad("num_expert must be at least 1".into());
        }
        if self.bilinear_dim == 0 || self.mid_dim == 0 {
            return bad("bilinear_dim and mid_dim must be positive".into());
        }
        if self.use_bilinear_encoder && self.enc_layers == 0 {
            return bad("bilinear encoder needs at least one layer".into());
        }
        if self.dec_layers == 0 {
            return bad("decoder needs at least one layer".into());
        }
        if self.vocab_size < 4 {
            return bad("vocabulary must hold the 4 reserved tokens".into());
        }
        if self.t_max < 2 || self.channels == 0 {
            return bad("t_max must be at least 2 and channels positive".into());
        }
        Ok(())
    }
}
