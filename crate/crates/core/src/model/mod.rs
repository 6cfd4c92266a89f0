//! K-block tubelet ViT encoder with per-block masked-autoencoding decoders.
//!
//! Block 1 owns the tubelet embedding, block K owns the output LayerNorm, and
//! every block boundary can be cut with a stop-gradient so that block k's loss
//! reaches only block k and its decoder.

mod checkpoint;
mod config;
mod params;

use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::{stream, Subsystem};
use crate::tensor::Tensor;
use crate::tokenizer::{MaskPattern, TokenGrid};

pub use checkpoint::{Checkpoint, CheckpointMeta, OptimizerGroup, CHECKPOINT_VERSION};
pub use config::{DecoderConfig, DecoderLayout, EncoderConfig, ModelConfig};
pub use params::{count_params, Init, ParamCount, ParamOwner, ParamSpec};
use params::{architecture, Architecture, Decoder, Layer, Linear, Norm};

const LN_EPS: f32 = 1e-6;
const INIT_STD: f64 = 0.02;

/// Fixed 3-D factorised sin/cos position table, `[total_tokens, dim]`.
///
/// The channel range is split between the time, row and column coordinates;
/// each part is a standard 1-D sinusoidal encoding of that coordinate.
pub fn sincos_positions(grid: &TokenGrid, dim: usize) -> Tensor {
    let part = (dim / 3) & !1;
    let widths = [part, part, dim - 2 * part];
    let mut out = Tensor::zeros([grid.total(), dim]);
    let cols = dim;
    for i in 0..grid.total() {
        let (t, h, w) = grid.coords(i);
        let mut off = 0;
        for (coord, width) in [t, h, w].into_iter().zip(widths) {
            let half = width / 2;
            for j in 0..half {
                let freq = 1.0 / 10000f64.powf(j as f64 / half.max(1) as f64);
                let a = coord as f64 * freq;
                out.data_mut()[i * cols + off + j] = a.sin() as f32;
                out.data_mut()[i * cols + off + half + j] = a.cos() as f32;
            }
            off += width;
        }
    }
    out
}

fn name_counter(name: &str) -> u64 {
    let digest = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn init_tensor(spec: &ParamSpec, seed: u64) -> Tensor {
    use rand_distr::{Distribution, Normal};
    match spec.init {
        Init::Zeros => Tensor::zeros(spec.shape.clone()),
        Init::Ones => Tensor::full(spec.shape.clone(), 1.0),
        Init::TruncNormal => {
            // Seeded by name so a parameter initialises identically in every layout.
            let mut rng = stream(seed, Subsystem::Init, name_counter(&spec.name));
            let normal = Normal::new(0.0, INIT_STD).expect("valid std");
            Tensor::from_fn(spec.shape.clone(), |_| loop {
                let v: f64 = normal.sample(&mut rng);
                if v.abs() <= 2.0 * INIT_STD {
                    break v as f32;
                }
            })
        }
    }
}

/// Which parameters a forward pass records as differentiable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Trainable {
    All,
    None,
    Only(Vec<ParamOwner>),
}

impl Trainable {
    fn includes(&self, owner: ParamOwner) -> bool {
        match self {
            Trainable::All => true,
            Trainable::None => false,
            Trainable::Only(v) => v.contains(&owner),
        }
    }
}

/// Binds model parameters onto one graph, at most once each.
pub struct Binder<'p> {
    params: &'p [Tensor],
    specs: &'p [ParamSpec],
    trainable: Trainable,
    vars: Vec<Option<Var>>,
}

impl<'p> Binder<'p> {
    fn bind(&mut self, g: &mut Graph<'p>, id: usize) -> Var {
        if let Some(v) = self.vars[id] {
            return v;
        }
        let t = &self.params[id];
        let v = if self.trainable.includes(self.specs[id].owner) {
            g.param(t)
        } else {
            g.frozen(t)
        };
        self.vars[id] = Some(v);
        v
    }

    /// Graph node of parameter `id`, if it has been bound.
    pub fn var(&self, id: usize) -> Option<Var> {
        self.vars[id]
    }

    /// `(parameter id, graph node)` for every bound differentiable parameter.
    pub fn bound(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (i, v)))
            .filter(|(i, _)| self.trainable.includes(self.specs[*i].owner))
    }
}

/// Options for one encoder pass.
#[derive(Debug, Clone, Default)]
pub struct EncodeOptions<'a> {
    /// Feed `stop_gradient(h_k)` to block k+1.
    pub isolate: bool,
    /// Run blocks `0..upto`; `None` runs all of them.
    pub upto: Option<usize>,
    /// Replace the input of block k+1 by a constant `pinned[k]` when present.
    /// Used to evaluate a block's loss with its upstream input held fixed.
    pub pinned: Option<&'a [Option<Tensor>]>,
}

/// The partitioned encoder, its decoders, and their parameters.
#[derive(Debug, Clone)]
pub struct BlockModel {
    config: ModelConfig,
    layout: DecoderLayout,
    grid: TokenGrid,
    arch: Architecture,
    params: Vec<Tensor>,
    enc_pos: Tensor,
    dec_pos: Tensor,
}

impl BlockModel {
    pub fn new(config: ModelConfig, layout: DecoderLayout, seed: u64) -> Result<Self> {
        config.validate()?;
        let arch = architecture(&config, layout);
        let params = arch.specs.iter().map(|s| init_tensor(s, seed)).collect();
        Self::assemble(config, layout, arch, params)
    }

    fn assemble(
        config: ModelConfig,
        layout: DecoderLayout,
        arch: Architecture,
        params: Vec<Tensor>,
    ) -> Result<Self> {
        let grid = config.grid()?;
        let enc_pos = sincos_positions(&grid, config.encoder.embed_dim);
        let dec_pos = sincos_positions(&grid, config.decoder.width);
        Ok(Self {
            config,
            layout,
            grid,
            arch,
            params,
            enc_pos,
            dec_pos,
        })
    }

    /// Rebuild from stored parameters, checking them against the registry.
    pub fn from_parts(config: ModelConfig, layout: DecoderLayout, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let arch = architecture(&config, layout);
        if arch.specs.len() != params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                arch.specs.len(),
                params.len()
            )));
        }
        for (s, p) in arch.specs.iter().zip(&params) {
            if s.shape != p.shape() {
                return Err(Error::invalid(format!(
                    "{}: expected shape {:?}, got {:?}",
                    s.name,
                    s.shape,
                    p.shape()
                )));
            }
        }
        Self::assemble(config, layout, arch, params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> DecoderLayout {
        self.layout
    }

    pub fn grid(&self) -> &TokenGrid {
        &self.grid
    }

    pub fn k(&self) -> usize {
        self.config.encoder.k
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.arch.specs
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn has_decoder(&self, k: usize) -> bool {
        self.arch.decoders.get(k).is_some_and(Option::is_some)
    }

    /// Blocks that own a decoder.
    pub fn decoder_blocks(&self) -> Vec<usize> {
        (0..self.k()).filter(|&k| self.has_decoder(k)).collect()
    }

    pub fn param_ids(&self, owner: ParamOwner) -> Vec<usize> {
        (0..self.arch.specs.len())
            .filter(|&i| self.arch.specs[i].owner == owner)
            .collect()
    }

    pub fn total_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// SHA-256 over the parameters of one owner, hex encoded.
    pub fn owner_hash(&self, owner: ParamOwner) -> String {
        let mut h = Sha256::new();
        for i in self.param_ids(owner) {
            for v in self.params[i].data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// SHA-256 over every parameter, hex encoded.
    pub fn params_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            for v in p.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn binder(&self, trainable: Trainable) -> Binder<'_> {
        Binder {
            params: &self.params,
            specs: &self.arch.specs,
            trainable,
            vars: vec![None; self.params.len()],
        }
    }

    fn linear<'p>(&'p self, g: &mut Graph<'p>, b: &mut Binder<'p>, x: Var, l: Linear) -> Result<Var> {
        let w = b.bind(g, l.w);
        let bias = b.bind(g, l.b);
        let y = g.matmul(x, w)?;
        Ok(g.add(y, bias)?)
    }

    fn norm<'p>(&'p self, g: &mut Graph<'p>, b: &mut Binder<'p>, x: Var, n: Norm) -> Result<Var> {
        let gain = b.bind(g, n.g);
        let bias = b.bind(g, n.b);
        Ok(g.layer_norm(x, Some(gain), Some(bias), LN_EPS)?)
    }

    /// Pre-norm transformer layer with full self-attention over the rows of `x`.
    fn layer<'p>(&'p self, g: &mut Graph<'p>, b: &mut Binder<'p>, x: Var, l: &Layer) -> Result<Var> {
        let dim = g.shape(x)[1];
        let head_dim = dim / l.heads;
        let scale = 1.0 / (head_dim as f32).sqrt();

        let a = self.norm(g, b, x, l.norm1)?;
        let qkv = self.linear(g, b, a, l.qkv)?;
        let mut heads = Vec::with_capacity(l.heads);
        for h in 0..l.heads {
            let q = g.narrow_cols(qkv, h * head_dim, head_dim)?;
            let k = g.narrow_cols(qkv, dim + h * head_dim, head_dim)?;
            let v = g.narrow_cols(qkv, 2 * dim + h * head_dim, head_dim)?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, scale);
            let p = g.softmax(scores);
            heads.push(g.matmul(p, v)?);
        }
        let attn = g.concat_cols(&heads)?;
        let attn = self.linear(g, b, attn, l.proj)?;
        let x = g.add(x, attn)?;

        let m = self.norm(g, b, x, l.norm2)?;
        let m = self.linear(g, b, m, l.fc1)?;
        let m = g.gelu(m);
        let m = self.linear(g, b, m, l.fc2)?;
        Ok(g.add(x, m)?)
    }

    /// Record the encoder on `g`. `tokens` are raw tubelets `[n, patch_dim]`
    /// at grid positions `positions`. Returns `h_1..h_upto`.
    pub fn encode<'p>(
        &'p self,
        g: &mut Graph<'p>,
        b: &mut Binder<'p>,
        tokens: Var,
        positions: &[usize],
        opts: &EncodeOptions<'_>,
    ) -> Result<Vec<Var>> {
        if positions.is_empty() {
            return Err(Error::invalid(
                "encoder input is empty (every token masked)",
            ));
        }
        if g.shape(tokens) != [positions.len(), self.grid.patch_dim()] {
            return Err(Error::invalid(format!(
                "token tensor {:?} does not match {} positions × patch dim {}",
                g.shape(tokens),
                positions.len(),
                self.grid.patch_dim()
            )));
        }
        let upto = opts.upto.unwrap_or(self.k()).min(self.k());
        let mut outputs = Vec::with_capacity(upto);
        let mut x = tokens;
        for (k, block) in self.arch.blocks.iter().take(upto).enumerate() {
            if k > 0 {
                let prev = *outputs.last().expect("previous block ran");
                x = match opts.pinned.and_then(|p| p.get(k - 1)).and_then(Option::as_ref) {
                    Some(t) => g.constant(t.clone()),
                    None if opts.isolate => g.stop_gradient(prev),
                    None => prev,
                };
            }
            if let Some(embed) = block.embed {
                x = self.linear(g, b, x, embed)?;
                let pos = gather(&self.enc_pos, positions);
                let pos = g.constant(pos);
                x = g.add(x, pos)?;
            }
            for layer in &block.layers {
                x = self.layer(g, b, x, layer)?;
            }
            if let Some(n) = block.norm {
                x = self.norm(g, b, x, n)?;
            }
            outputs.push(x);
        }
        Ok(outputs)
    }

    fn decoder(&self, k: usize) -> Result<&Decoder> {
        self.arch
            .decoders
            .get(k)
            .and_then(Option::as_ref)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "block {} has no decoder (no intermediate decoders in this layout)",
                    k + 1
                ))
            })
    }

    /// Record decoder `k` on `g`: project the visible tokens `h`, scatter them
    /// to the grid with the mask token at masked slots, add positions, run the
    /// decoder and read predictions at the masked slots. Returns
    /// `[n_masked, patch_dim]`.
    pub fn decode<'p>(
        &'p self,
        g: &mut Graph<'p>,
        b: &mut Binder<'p>,
        k: usize,
        h: Var,
        mask: &MaskPattern,
    ) -> Result<Var> {
        let dec = self.decoder(k)?;
        if mask.total() != self.grid.total() {
            return Err(Error::invalid(format!(
                "mask covers {} tokens, grid has {}",
                mask.total(),
                self.grid.total()
            )));
        }
        if g.shape(h)[0] != mask.n_visible {
            return Err(Error::invalid(format!(
                "{} encoder tokens but mask has {} visible",
                g.shape(h)[0],
                mask.n_visible
            )));
        }
        let e = self.linear(g, b, h, dec.embed)?;
        let mut parts = vec![e];
        if mask.n_masked > 0 {
            let mt = b.bind(g, dec.mask_token);
            parts.push(g.gather_rows(mt, &vec![0; mask.n_masked])?);
        }
        let stacked = g.concat_rows(&parts)?;
        // Row order of `stacked` is visible-then-masked; restore grid order.
        let (mut vis, mut msk) = (0, mask.n_visible);
        let order: Vec<usize> = mask
            .masked
            .iter()
            .map(|&m| {
                let slot = if m { &mut msk } else { &mut vis };
                *slot += 1;
                *slot - 1
            })
            .collect();
        let mut x = g.gather_rows(stacked, &order)?;
        let pos = g.constant(self.dec_pos.clone());
        x = g.add(x, pos)?;
        for layer in &dec.layers {
            x = self.layer(g, b, x, layer)?;
        }
        x = self.norm(g, b, x, dec.norm)?;
        let x = g.gather_rows(x, &mask.masked_indices())?;
        self.linear(g, b, x, dec.head)
    }

    /// Block outputs `h_1..h_K` for tokens at `positions`, without gradients.
    pub fn forward_blocks(&self, tokens: &Tensor, positions: &[usize], isolate: bool) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let mut b = self.binder(Trainable::None);
        let x = g.constant(tokens.clone());
        let opts = EncodeOptions {
            isolate,
            ..Default::default()
        };
        let hs = self.encode(&mut g, &mut b, x, positions, &opts)?;
        Ok(hs.into_iter().map(|h| g.tensor(h)).collect())
    }

    /// Predictions of decoder `k` at the masked slots of `mask`.
    pub fn decode_block(&self, k: usize, h: &Tensor, mask: &MaskPattern) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = self.binder(Trainable::None);
        let hv = g.constant(h.clone());
        let pred = self.decode(&mut g, &mut b, k, hv, mask)?;
        Ok(g.tensor(pred))
    }
}

/// Rows of `t` at `idx`.
pub(crate) fn gather(t: &Tensor, idx: &[usize]) -> Tensor {
    let c = t.cols();
    let mut out = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        out.extend_from_slice(t.row(i));
    }
    Tensor::new([idx.len(), c], out).expect("gathered rows")
}

/// Mean squared error over masked positions. `pred` is `[n_masked, P]` in
/// grid order, `targets` is the full `[total, P]` target tensor.
///
/// With several clips the mean runs over clips × masked tokens × patch dims.
pub fn masked_mse(items: &[(&Tensor, &Tensor, &MaskPattern)]) -> Result<f64> {
    let mut sse = 0.0f64;
    let mut count = 0usize;
    for (pred, targets, mask) in items {
        if mask.n_masked == 0 {
            return Err(Error::invalid("masked MSE is undefined with no masked tokens"));
        }
        let p = targets.cols();
        if pred.shape() != [mask.n_masked, p] || targets.rows() != mask.total() {
            return Err(Error::invalid(format!(
                "prediction {:?} / target {:?} do not match mask ({} masked of {})",
                pred.shape(),
                targets.shape(),
                mask.n_masked,
                mask.total()
            )));
        }
        for (row, i) in mask.masked_indices().into_iter().enumerate() {
            for (a, b) in pred.row(row).iter().zip(targets.row(i)) {
                let d = (*a - *b) as f64;
                sse += d * d;
            }
        }
        count += mask.n_masked * p;
    }
    if count == 0 {
        return Err(Error::invalid("masked MSE over an empty batch"));
    }
    Ok(sse / count as f64)
}

/// Record `scale · Σ (pred − target)²` over the masked rows of `targets`.
pub fn masked_sse_graph<'p>(
    g: &mut Graph<'p>,
    pred: Var,
    targets: &Tensor,
    mask: &MaskPattern,
    scale: f32,
) -> Result<Var> {
    if mask.n_masked == 0 {
        return Err(Error::invalid("masked MSE is undefined with no masked tokens"));
    }
    let t = g.constant(gather(targets, &mask.masked_indices()));
    let d = g.sub(pred, t)?;
    let sq = g.mul(d, d)?;
    let s = g.sum(sq);
    Ok(g.scale(s, scale))
}
