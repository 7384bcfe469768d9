use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the noise-prediction UNet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    /// 1 for magnitude imagery.
    pub in_channels: usize,
    /// Channel width of the first resolution level.
    pub base_channels: usize,
    /// Per-level width multipliers; one downsampling between consecutive levels.
    pub channel_multipliers: Vec<usize>,
    /// Residual blocks in the encoder, spread over the levels. The decoder mirrors them.
    pub res_blocks_total_per_side: usize,
    /// Feature-map side length at which self-attention is inserted.
    pub attention_resolution: usize,
    pub dropout: f64,
    /// `Some(K)` makes the model class-conditional.
    pub num_classes: Option<usize>,
    pub time_embed_dim: usize,
    /// Side length of the square input.
    pub image_size: usize,
    /// Largest timestep the model accepts.
    pub timesteps: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 1,
            base_channels: 64,
            channel_multipliers: vec![1, 2, 4, 8],
            res_blocks_total_per_side: 8,
            attention_resolution: 32,
            dropout: 0.3,
            num_classes: None,
            time_embed_dim: 256,
            image_size: 128,
            timesteps: 1000,
        }
    }
}

impl UNetConfig {
    /// Compact configuration with the time embedding at `4 * base_channels`.
    pub fn small(image_size: usize, base_channels: usize, multipliers: &[usize], attention_resolution: usize) -> Self {
        UNetConfig {
            base_channels,
            channel_multipliers: multipliers.to_vec(),
            res_blocks_total_per_side: multipliers.len(),
            attention_resolution,
            time_embed_dim: 4 * base_channels,
            image_size,
            ..UNetConfig::default()
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    /// Feature-map side length at each level.
    pub fn resolutions(&self) -> Vec<usize> {
        (0..self.levels()).map(|i| self.image_size >> i).collect()
    }

    pub fn level_channels(&self) -> Vec<usize> {
        self.channel_multipliers.iter().map(|m| m * self.base_channels).collect()
    }

    /// Residual blocks per level; any remainder goes to the finest levels.
    pub fn blocks_per_level(&self) -> Vec<usize> {
        let levels = self.levels().max(1);
        let (base, extra) = (self.res_blocks_total_per_side / levels, self.res_blocks_total_per_side % levels);
        (0..self.levels()).map(|i| base + usize::from(i < extra)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidArgument(msg));
        if self.in_channels == 0 {
            return fail("in_channels must be positive".into());
        }
        if self.base_channels < 2 || self.base_channels % 2 != 0 {
            return fail(format!("base_channels must be even and at least 2, got {}", self.base_channels));
        }
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return fail("channel_multipliers must be non-empty and positive".into());
        }
        let factor = 1usize << (self.levels() - 1);
        if self.image_size == 0 || self.image_size % factor != 0 {
            return fail(format!(
                "image_size {} not divisible by {factor} ({} levels)",
                self.image_size,
                self.levels()
            ));
        }
        if !self.resolutions().contains(&self.attention_resolution) {
            return fail(format!(
                "attention_resolution {} is not one of the feature-map sizes {:?}",
                self.attention_resolution,
                self.resolutions()
            ));
        }
        if self.res_blocks_total_per_side < self.levels() {
            return fail(format!(
                "need at least one residual block per level ({} < {})",
                self.res_blocks_total_per_side,
                self.levels()
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.num_classes == Some(0) {
            return fail("num_classes must be positive when present".into());
        }
        if self.time_embed_dim == 0 || self.timesteps == 0 {
            return fail("time_embed_dim and timesteps must be positive".into());
        }
        Ok(())
    }
}

/// Number of normalization groups: the largest divisor of `channels` not above 32.
pub fn group_count(channels: usize) -> usize {
    (1..=channels.min(32)).rev().find(|g| channels % g == 0).unwrap_or(1)
}
