//! Parameter registry: every learnable tensor with its owner and shape, in a
//! fixed registration order shared by initialisation, checkpoints and counts.

use serde::{Deserialize, Serialize};

use super::config::{DecoderConfig, DecoderLayout, ModelConfig};

/// The encoder block or decoder a parameter belongs to (0-based block index).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamOwner {
    Encoder(usize),
    Decoder(usize),
}

impl ParamOwner {
    pub fn block(self) -> usize {
        match self {
            ParamOwner::Encoder(k) | ParamOwner::Decoder(k) => k,
        }
    }

    pub fn label(self) -> String {
        match self {
            ParamOwner::Encoder(k) => format!("encoder{}", k + 1),
            ParamOwner::Decoder(k) => format!("decoder{}", k + 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Init {
    TruncNormal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub owner: ParamOwner,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Weight decay applies to matrices only, not to biases and norm gains.
    pub fn decays(&self) -> bool {
        self.shape.len() >= 2 && self.init == Init::TruncNormal
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    /// `[in, out]`
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Norm {
    pub g: usize,
    pub b: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Layer {
    pub norm1: Norm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct EncoderBlock {
    pub embed: Option<Linear>,
    pub layers: Vec<Layer>,
    pub norm: Option<Norm>,
}

#[derive(Debug, Clone)]
pub(crate) struct Decoder {
    pub embed: Linear,
    pub mask_token: usize,
    pub layers: Vec<Layer>,
    pub norm: Norm,
    pub head: Linear,
}

#[derive(Debug, Clone)]
pub(crate) struct Architecture {
    pub specs: Vec<ParamSpec>,
    pub blocks: Vec<EncoderBlock>,
    /// Indexed by block; `None` where the layout has no decoder.
    pub decoders: Vec<Option<Decoder>>,
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn add(&mut self, name: String, owner: ParamOwner, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec {
            name,
            owner,
            shape,
            init,
        });
        self.specs.len() - 1
    }

    fn linear(&mut self, name: &str, owner: ParamOwner, input: usize, output: usize) -> Linear {
        Linear {
            w: self.add(
                format!("{name}.w"),
                owner,
                vec![input, output],
                Init::TruncNormal,
            ),
            b: self.add(format!("{name}.b"), owner, vec![output], Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, owner: ParamOwner, dim: usize) -> Norm {
        Norm {
            g: self.add(format!("{name}.g"), owner, vec![dim], Init::Ones),
            b: self.add(format!("{name}.b"), owner, vec![dim], Init::Zeros),
        }
    }

    fn layer(&mut self, name: &str, owner: ParamOwner, dim: usize, heads: usize, mlp: usize) -> Layer {
        Layer {
            norm1: self.norm(&format!("{name}.norm1"), owner, dim),
            qkv: self.linear(&format!("{name}.qkv"), owner, dim, 3 * dim),
            proj: self.linear(&format!("{name}.proj"), owner, dim, dim),
            norm2: self.norm(&format!("{name}.norm2"), owner, dim),
            fc1: self.linear(&format!("{name}.fc1"), owner, dim, mlp * dim),
            fc2: self.linear(&format!("{name}.fc2"), owner, mlp * dim, dim),
            heads,
        }
    }

    fn decoder(&mut self, k: usize, enc_dim: usize, cfg: &DecoderConfig, patch_dim: usize) -> Decoder {
        let owner = ParamOwner::Decoder(k);
        let base = format!("dec{}", k + 1);
        let embed = self.linear(&format!("{base}.embed"), owner, enc_dim, cfg.width);
        let mask_token = self.add(
            format!("{base}.mask_token"),
            owner,
            vec![1, cfg.width],
            Init::TruncNormal,
        );
        let layers = (0..cfg.depth)
            .map(|l| {
                self.layer(
                    &format!("{base}.layer{l}"),
                    owner,
                    cfg.width,
                    cfg.n_heads,
                    cfg.mlp_ratio,
                )
            })
            .collect();
        let norm = self.norm(&format!("{base}.norm"), owner, cfg.width);
        let head = self.linear(&format!("{base}.head"), owner, cfg.width, patch_dim);
        Decoder {
            embed,
            mask_token,
            layers,
            norm,
            head,
        }
    }
}

/// Lay out every parameter of the model. Encoder parameters come first, in
/// block order, followed by decoders in block order.
pub(crate) fn architecture(cfg: &ModelConfig, layout: DecoderLayout) -> Architecture {
    let e = &cfg.encoder;
    let patch_dim = cfg.tubelet.t * cfg.tubelet.h * cfg.tubelet.w * cfg.clip.channels;
    let mut b = Builder { specs: Vec::new() };
    let per_block = e.layers_per_block();
    let blocks = (0..e.k)
        .map(|k| {
            let owner = ParamOwner::Encoder(k);
            let base = format!("enc{}", k + 1);
            let embed =
                (k == 0).then(|| b.linear(&format!("{base}.patch_embed"), owner, patch_dim, e.embed_dim));
            let layers = (0..per_block)
                .map(|l| {
                    b.layer(
                        &format!("{base}.layer{}", k * per_block + l),
                        owner,
                        e.embed_dim,
                        e.n_heads,
                        e.mlp_ratio,
                    )
                })
                .collect();
            let norm = (k + 1 == e.k || e.boundary_norm)
                .then(|| b.norm(&format!("{base}.norm"), owner, e.embed_dim));
            EncoderBlock {
                embed,
                layers,
                norm,
            }
        })
        .collect();
    let decoders = (0..e.k)
        .map(|k| {
            let has = match layout {
                DecoderLayout::PerBlock => true,
                DecoderLayout::FinalOnly => k + 1 == e.k,
            };
            has.then(|| b.decoder(k, e.embed_dim, &cfg.decoder, patch_dim))
        })
        .collect();
    Architecture {
        specs: b.specs,
        blocks,
        decoders,
    }
}

/// Encoder and decoder parameter totals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub k: usize,
    pub p_enc: usize,
    /// One decoder.
    pub p_dec: usize,
    pub p_e2e: usize,
    pub p_bw: usize,
}

impl ParamCount {
    /// `(K−1)·P_dec / (P_enc + P_dec)`.
    pub fn relative_increase(&self) -> f64 {
        (self.k - 1) as f64 * self.p_dec as f64 / self.p_e2e as f64
    }
}

/// Count parameters by walking the registry.
pub fn count_params(cfg: &ModelConfig) -> ParamCount {
    let arch = architecture(cfg, DecoderLayout::PerBlock);
    let k = cfg.encoder.k;
    let mut p_enc = 0;
    let mut per_decoder = vec![0usize; k];
    for s in &arch.specs {
        match s.owner {
            ParamOwner::Encoder(_) => p_enc += s.numel(),
            ParamOwner::Decoder(j) => per_decoder[j] += s.numel(),
        }
    }
    debug_assert!(per_decoder.windows(2).all(|w| w[0] == w[1]));
    let p_dec = per_decoder[k - 1];
    ParamCount {
        k,
        p_enc,
        p_dec,
        p_e2e: p_enc + p_dec,
        p_bw: p_enc + k * p_dec,
    }
}
