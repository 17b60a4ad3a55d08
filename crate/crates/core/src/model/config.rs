use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::DType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionalEmbedding {
    Learnable,
    None,
}

/// Architecture of the compact convolutional transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CctConfig {
    pub input_channels: usize,
    /// Square input side in pixels.
    pub input_size: usize,
    pub conv_blocks: usize,
    pub tokenizer_kernel: usize,
    pub tokenizer_stride: usize,
    pub tokenizer_padding: usize,
    pub pool_window: usize,
    pub pool_stride: usize,
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub dropout: f64,
    pub num_classes: usize,
    pub positional_embedding: PositionalEmbedding,
    pub precision: DType,
}

impl Default for CctConfig {
    fn default() -> Self {
        CctConfig {
            input_channels: 2,
            input_size: 64,
            conv_blocks: 2,
            tokenizer_kernel: 3,
            tokenizer_stride: 1,
            tokenizer_padding: 1,
            pool_window: 3,
            pool_stride: 2,
            embed_dim: 128,
            encoder_layers: 2,
            heads: 4,
            mlp_ratio: 2.0,
            dropout: 0.1,
            num_classes: 2,
            positional_embedding: PositionalEmbedding::Learnable,
            precision: DType::F32,
        }
    }
}

impl CctConfig {
    /// The small model used by gradient checks: 8x8 input, D = 8, one
    /// encoder layer with two heads.
    pub fn tiny() -> Self {
        CctConfig {
            input_channels: 2,
            input_size: 8,
            conv_blocks: 1,
            embed_dim: 8,
            encoder_layers: 1,
            heads: 2,
            dropout: 0.0,
            precision: DType::F64,
            ..CctConfig::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn mlp_width(&self) -> usize {
        ((self.embed_dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    /// Spatial size after each tokenizer block, input first.
    pub fn tokenizer_sizes(&self) -> Result<Vec<usize>> {
        let mut sizes = vec![self.input_size];
        let mut s = self.input_size;
        for block in 0..self.conv_blocks {
            let padded = s + 2 * self.tokenizer_padding;
            if self.tokenizer_kernel > padded {
                return Err(Error::Geometry(format!(
                    "block {block}: kernel {} exceeds padded size {padded}",
                    self.tokenizer_kernel
                )));
            }
            s = (padded - self.tokenizer_kernel) / self.tokenizer_stride + 1;
            if self.pool_window > s {
                return Err(Error::Geometry(format!(
                    "block {block}: pool window {} exceeds feature size {s}",
                    self.pool_window
                )));
            }
            s = (s - self.pool_window) / self.pool_stride + 1;
            sizes.push(s);
        }
        Ok(sizes)
    }

    /// Side of the token grid produced by the tokenizer.
    pub fn grid_size(&self) -> Result<usize> {
        Ok(*self.tokenizer_sizes()?.last().unwrap())
    }

    pub fn seq_len(&self) -> Result<usize> {
        self.grid_size().map(|g| g * g)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !matches!(self.input_channels, 1 | 2) {
            return fail(format!(
                "input_channels must be 1 or 2, got {}",
                self.input_channels
            ));
        }
        if self.conv_blocks == 0 {
            return fail("conv_blocks must be >= 1".into());
        }
        if self.tokenizer_kernel == 0
            || self.tokenizer_stride == 0
            || self.pool_window == 0
            || self.pool_stride == 0
        {
            return fail("tokenizer kernel, stride and pool sizes must be >= 1".into());
        }
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            ));
        }
        if !(self.mlp_ratio > 0.0) {
            return fail(format!("mlp_ratio must be > 0, got {}", self.mlp_ratio));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.num_classes < 2 {
            return fail(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            ));
        }
        self.tokenizer_sizes()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}
