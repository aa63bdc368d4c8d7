//! Conditional generator with per-layer style-code injection, the dual-head
//! projection discriminator and multi-condition code mixing.

mod discriminator;
mod generator;
mod mix;

pub use discriminator::{DiscCache, DiscOut, DiscriminatorNet};
pub use generator::{CodesCache, GenCache, GeneratorNet, StyleCodes, StyleLayer, SynthCache};
pub use mix::{MixMask, MixMode};

use crate::error::{Error, Result};
use crate::nn::Stage;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanConfig {
    pub z_dim: usize,
    pub w_dim: usize,
    pub mapping_layers: usize,
    /// Condition feature dimension.
    pub d: usize,
    /// Hidden width of each layer's condition net.
    pub cond_hidden: usize,
    /// Output channels of each synthesis layer; resolution doubles after
    /// the first.
    pub g_channels: Vec<usize>,
    /// Side of the learned constant input.
    pub base: usize,
    /// Init gain of the fusion affine; small values start the modulation
    /// near identity.
    pub u_gain: f64,
    pub d_stages: Vec<Stage>,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            z_dim: 128,
            w_dim: 128,
            mapping_layers: 4,
            d: 64,
            cond_hidden: 64,
            g_channels: vec![32, 32, 16, 8],
            base: 4,
            u_gain: 0.25,
            d_stages: vec![
                Stage { channels: 16, stride: 2 },
                Stage { channels: 32, stride: 2 },
                Stage { channels: 64, stride: 2 },
                Stage { channels: 64, stride: 1 },
            ],
        }
    }
}

impl GanConfig {
    pub fn image_side(&self) -> usize {
        self.base << self.g_channels.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [self.z_dim, self.w_dim, self.mapping_layers, self.d, self.cond_hidden, self.base];
        if pos.contains(&0) || self.g_channels.is_empty() || self.g_channels.contains(&0) {
            return Err(Error::Config("network sizes must be positive".into()));
        }
        if self.d_stages.is_empty() || self.d_stages.iter().any(|s| s.channels == 0 || s.stride == 0) {
            return Err(Error::Config("discriminator needs at least one non-empty stage".into()));
        }
        Ok(())
    }
}
