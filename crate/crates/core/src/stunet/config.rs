use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Toy image U-Net standing in for a pretrained text-to-image model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct T2IConfig {
    /// Number of resolution levels (>= 2); spatial extent halves between levels.
    pub levels: usize,
    pub base_channels: usize,
    /// Channel multiplier per level, relative to `base_channels`.
    pub channel_mult: Vec<usize>,
    /// Width of the timestep + class embedding.
    pub cond_dim: usize,
    /// Size of the class vocabulary used as a stand-in for text prompts.
    pub num_classes: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub norm_groups: usize,
}

impl Default for T2IConfig {
    fn default() -> Self {
        T2IConfig {
            levels: 2,
            base_channels: 8,
            channel_mult: vec![1, 2],
            cond_dim: 16,
            num_classes: 5,
            in_channels: 3,
            out_channels: 3,
            norm_groups: 2,
        }
    }
}

impl T2IConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::invalid(format!("levels must be >= 2, got {}", self.levels)));
        }
        if self.channel_mult.len() != self.levels {
            return Err(Error::invalid(format!(
                "channel_mult has {} entries for {} levels",
                self.channel_mult.len(),
                self.levels
            )));
        }
        if self.cond_dim == 0 || self.cond_dim % 2 != 0 {
            return Err(Error::invalid(format!("cond_dim must be positive and even, got {}", self.cond_dim)));
        }
        if self.num_classes == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("num_classes, in_channels and out_channels must be positive"));
        }
        for level in 0..self.levels {
            let c = self.channels(level);
            if c == 0 || c % 2 != 0 {
                return Err(Error::invalid(format!("level {level} has {c} channels; channels must be even")));
            }
            if self.norm_groups == 0 || c % self.norm_groups != 0 {
                return Err(Error::invalid(format!(
                    "level {level}: {c} channels not divisible into {} norm groups",
                    self.norm_groups
                )));
            }
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mult[level]
    }

    /// Spatial extents must be divisible by `2^(levels-1)`.
    pub fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        let f = 1usize << (self.levels - 1);
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::shape(format!(
                "spatial extents H={h} W={w} must be positive multiples of 2^(levels-1) = {f}"
            )));
        }
        Ok(())
    }
}

/// Inflated space-time U-Net built around a [`T2IConfig`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct STUNetConfig {
    pub t2i: T2IConfig,
    /// Length of the temporal convolution kernel (odd, >= 3).
    pub temporal_kernel: usize,
    /// Level transitions `i -> i+1` that also halve (and later double) time.
    pub temporal_levels: Vec<usize>,
    /// Number of stacked temporal-attention blocks at the coarsest level.
    pub attn_blocks_coarsest: usize,
}

impl Default for STUNetConfig {
    fn default() -> Self {
        STUNetConfig { t2i: T2IConfig::default(), temporal_kernel: 3, temporal_levels: vec![0], attn_blocks_coarsest: 2 }
    }
}

impl STUNetConfig {
    pub fn validate(&self) -> Result<()> {
        self.t2i.validate()?;
        if self.temporal_kernel < 3 || self.temporal_kernel % 2 == 0 {
            return Err(Error::invalid(format!("temporal_kernel must be odd and >= 3, got {}", self.temporal_kernel)));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &l in &self.temporal_levels {
            if l + 1 >= self.t2i.levels || !seen.insert(l) {
                return Err(Error::invalid(format!(
                    "temporal level {l} is not a distinct transition below {} levels",
                    self.t2i.levels
                )));
            }
        }
        Ok(())
    }

    pub fn resamples_time(&self, level: usize) -> bool {
        self.temporal_levels.contains(&level)
    }

    pub fn temporal_factor(&self) -> usize {
        1 << self.temporal_levels.len()
    }

    /// Frame counts must be divisible by `2^(number of temporal downsamples)`.
    pub fn check_frames(&self, t: usize) -> Result<()> {
        let f = self.temporal_factor();
        if t == 0 || t % f != 0 {
            return Err(Error::shape(format!(
                "frame count T={t} must be a positive multiple of {f} ({} temporal downsamples)",
                self.temporal_levels.len()
            )));
        }
        Ok(())
    }
}
