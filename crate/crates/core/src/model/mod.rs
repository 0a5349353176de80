//! The cross-modality UNet (two encoders, two decoders, two discriminators)
//! and the Siamese feature extractor, as forward computations over explicit
//! parameter sets.

mod checkpoint;
mod network;
mod params;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{Archive, Checkpoint, CheckpointKind};
pub use network::{EncodeOutput, EncodeValues, Mode, Network};
pub use params::{
    BatchNorm, Conv, ConvBnRelu, Decoder, Discriminator, Encoder, InferenceParams, Linear, ModelParams,
    ParamKind, Siamese, SubNetwork,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("invalid architecture: {0}")]
    InvalidConfig(String),
    #[error("{0} is not available on inference-only parameters")]
    Stripped(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Layer sizes of the whole model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub input_length: usize,
    pub encoder_blocks: usize,
    /// Channels of the first encoder block; doubled at every block.
    pub base_channels: usize,
    pub bottleneck_dim: usize,
    pub kernel_size: usize,
    pub siamese_channels: Vec<usize>,
    /// Length of the sequence the bottleneck is regrouped into before the Siamese network.
    pub siamese_input_length: usize,
    pub embedding_dim: usize,
    pub disc_blocks: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            input_length: 1024,
            encoder_blocks: 3,
            base_channels: 16,
            bottleneck_dim: 128,
            kernel_size: 3,
            siamese_channels: vec![16, 32, 64],
            siamese_input_length: 8,
            embedding_dim: 128,
            disc_blocks: 2,
        }
    }
}

impl ArchConfig {
    /// Small configuration for gradient verification.
    pub fn tiny() -> Self {
        Self {
            input_length: 16,
            encoder_blocks: 3,
            base_channels: 2,
            bottleneck_dim: 8,
            kernel_size: 3,
            siamese_channels: vec![2, 4, 8],
            siamese_input_length: 8,
            embedding_dim: 4,
            disc_blocks: 2,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.encoder_blocks == 0 || self.base_channels == 0 || self.embedding_dim == 0 {
            return bad("block count, channels and embedding size must be positive".into());
        }
        if self.kernel_size % 2 == 0 {
            return bad(format!("kernel size {} must be odd", self.kernel_size));
        }
        let down = 1usize << self.encoder_blocks;
        if self.input_length == 0 || self.input_length % down != 0 {
            return bad(format!("input length {} not divisible by {down}", self.input_length));
        }
        let bl = self.bottleneck_length();
        if self.bottleneck_dim == 0 || self.bottleneck_dim % bl != 0 {
            return bad(format!("bottleneck dim {} not a multiple of bottleneck length {bl}", self.bottleneck_dim));
        }
        if self.disc_blocks == 0 || self.disc_blocks > self.encoder_blocks {
            return bad(format!("discriminator blocks {} outside 1..={}", self.disc_blocks, self.encoder_blocks));
        }
        if self.siamese_channels.is_empty() || self.siamese_channels.contains(&0) {
            return bad("siamese channels must be nonempty and positive".into());
        }
        let sd = 1usize << self.siamese_channels.len();
        if self.siamese_input_length == 0
            || self.siamese_input_length % sd != 0
            || self.bottleneck_dim % self.siamese_input_length != 0
        {
            return bad(format!(
                "siamese input length {} must divide the bottleneck dim and be a multiple of {sd}",
                self.siamese_input_length
            ));
        }
        Ok(())
    }

    /// Channels of encoder block `i`.
    pub fn block_channels(&self, i: usize) -> usize {
        self.base_channels << i
    }

    /// Length of the encoder output after all pooling stages.
    pub fn bottleneck_length(&self) -> usize {
        self.input_length >> self.encoder_blocks
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.bottleneck_dim / self.bottleneck_length()
    }

    pub fn siamese_input_channels(&self) -> usize {
        self.bottleneck_dim / self.siamese_input_length
    }

    /// `(channels, length)` of skip map `i`.
    pub fn skip_shape(&self, i: usize) -> (usize, usize) {
        (self.block_channels(i), self.input_length >> i)
    }
}
