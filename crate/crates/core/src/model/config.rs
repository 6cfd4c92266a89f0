use serde::{Deserialize, Serialize};

use crate::data::ClipDims;
use crate::error::{Error, Result};
use crate::tokenizer::{TokenGrid, Tubelet};

fn default_mlp_ratio() -> usize {
    4
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub embed_dim: usize,
    pub n_heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    /// Number of gradient-isolated blocks.
    pub k: usize,
    /// Extra LayerNorm at every inner block boundary.
    #[serde(default)]
    pub boundary_norm: bool,
}

impl EncoderConfig {
    /// 12 layers, width 192, 3 heads.
    pub fn tiny(k: usize) -> Self {
        Self {
            n_layers: 12,
            embed_dim: 192,
            n_heads: 3,
            mlp_ratio: 4,
            k,
            boundary_norm: false,
        }
    }

    /// 12 layers, width 384, 6 heads.
    pub fn small(k: usize) -> Self {
        Self {
            embed_dim: 384,
            n_heads: 6,
            ..Self::tiny(k)
        }
    }

    pub fn layers_per_block(&self) -> usize {
        self.n_layers / self.k
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub depth: usize,
    pub width: usize,
    pub n_heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            width: 192,
            n_heads: 3,
            mlp_ratio: 4,
        }
    }
}

/// Which blocks own a decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderLayout {
    /// One decoder per block (blockwise training).
    PerBlock,
    /// A single decoder on the last block (end-to-end training).
    FinalOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub decoder: DecoderConfig,
    pub tubelet: Tubelet,
    pub clip: ClipDims,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        if e.k == 0 || e.n_layers == 0 || e.n_layers % e.k != 0 {
            return Err(Error::invalid(format!(
                "K={} must divide the {} encoder layers",
                e.k, e.n_layers
            )));
        }
        if e.n_heads == 0 || e.embed_dim % e.n_heads != 0 {
            return Err(Error::invalid(format!(
                "{} encoder heads do not divide width {}",
                e.n_heads, e.embed_dim
            )));
        }
        let d = &self.decoder;
        if d.n_heads == 0 || d.width % d.n_heads != 0 {
            return Err(Error::invalid(format!(
                "{} decoder heads do not divide width {}",
                d.n_heads, d.width
            )));
        }
        if e.mlp_ratio == 0 || d.mlp_ratio == 0 {
            return Err(Error::invalid("mlp ratio must be positive"));
        }
        self.grid()?;
        Ok(())
    }

    pub fn grid(&self) -> Result<TokenGrid> {
        TokenGrid::new(self.clip, self.tubelet)
    }

    pub fn k(&self) -> usize {
        self.encoder.k
    }

    pub fn embed_dim(&self) -> usize {
        self.encoder.embed_dim
    }
}
