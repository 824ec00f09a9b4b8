use serde::{Deserialize, Serialize};

use super::ModelError;

/// Network geometry. Spatial sizes are powers of two so that every encoder
/// scale can be brought to every other scale by repeated ×2 resizing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub input_size: usize,
    pub output_size: usize,
    pub encoder_stages: usize,
    pub decoder_stages: usize,
    pub base_width: usize,
    pub max_width: usize,
    pub style_dim: usize,
    pub mlp_layers: usize,
    pub disc_width: usize,
    pub embed_width: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            in_channels: 1,
            out_channels: 3,
            input_size: 32,
            output_size: 64,
            encoder_stages: 3,
            decoder_stages: 4,
            base_width: 16,
            max_width: 64,
            style_dim: 64,
            mlp_layers: 3,
            disc_width: 16,
            embed_width: 8,
        }
    }
}

impl ArchConfig {
    /// Narrow variant used by the test and acceptance suites.
    pub fn compact() -> Self {
        ArchConfig {
            base_width: 8,
            max_width: 16,
            style_dim: 16,
            disc_width: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if !self.input_size.is_power_of_two() || !self.output_size.is_power_of_two() {
            return err(format!(
                "input {} and output {} sizes must be powers of two",
                self.input_size, self.output_size
            ));
        }
        if self.input_size >> self.encoder_stages == 0 {
            return err(format!(
                "{} encoder stages cannot downsample {}",
                self.encoder_stages, self.input_size
            ));
        }
        let coarse = self.coarsest_size();
        if coarse << self.decoder_stages != self.output_size {
            return err(format!(
                "coarsest size {coarse} x 2^{} != output size {}",
                self.decoder_stages, self.output_size
            ));
        }
        if self.output_size != 2 * self.input_size {
            return err(format!(
                "output size {} must be twice the input size {}",
                self.output_size, self.input_size
            ));
        }
        if self.output_size >> 4 == 0 {
            return err("discriminator needs at least 16x16 images".into());
        }
        if self.output_size >> 3 == 0 {
            return err("embedder needs at least 8x8 images".into());
        }
        if [self.base_width, self.max_width, self.style_dim, self.disc_width, self.embed_width]
            .contains(&0)
            || self.mlp_layers == 0
            || self.decoder_stages == 0
        {
            return err("widths, mlp_layers and decoder_stages must be positive".into());
        }
        Ok(())
    }

    /// Number of encoder scales (input resolution plus one per downsample).
    pub fn encoder_levels(&self) -> usize {
        self.encoder_stages + 1
    }

    pub fn encoder_width(&self, level: usize) -> usize {
        (self.base_width << level).min(self.max_width)
    }

    pub fn encoder_size(&self, level: usize) -> usize {
        self.input_size >> level
    }

    pub fn coarsest_size(&self) -> usize {
        self.input_size >> self.encoder_stages
    }

    /// Spatial size of decoder stage `i` in `1..=decoder_stages`.
    pub fn stage_size(&self, stage: usize) -> usize {
        self.coarsest_size() << stage
    }

    /// Channel width of decoder stage `i`; stage 0 is the learned constant.
    pub fn stage_width(&self, stage: usize) -> usize {
        let from_top = self.decoder_stages - stage.min(self.decoder_stages);
        (self.base_width << from_top).min(self.max_width)
    }

    /// Encoder level whose spatial size equals decoder stage `i`, if any.
    pub fn skip_level(&self, stage: usize) -> Option<usize> {
        let size = self.stage_size(stage);
        (0..self.encoder_levels()).find(|&l| self.encoder_size(l) == size)
    }

    pub fn msca_in_width(&self) -> usize {
        (0..self.encoder_levels()).map(|l| self.encoder_width(l)).sum()
    }
}
