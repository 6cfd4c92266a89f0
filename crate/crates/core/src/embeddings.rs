//! Block-boundary representations on unmasked clips, mean-pooled per clip,
//! plus their on-disk dump format.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{write_atomic, Reader, Writer};
use crate::data::{AugmentMode, Clip, Dataset};
use crate::error::{Error, Result};
use crate::model::BlockModel;
use crate::tensor::Tensor;
use crate::training::prepare_clip;

const MAGIC: &[u8; 8] = b"BWSLEMBD";
pub const EMBEDDING_VERSION: u32 = 1;
const FLAG_TOKENS: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMeta {
    /// Identifier of the model the embeddings came from (parameter hash).
    pub model_id: String,
    /// Identifier of the dataset (manifest checksum when available).
    pub dataset_id: String,
    #[serde(default)]
    pub checkpoint_path: Option<String>,
    #[serde(default)]
    pub dataset_path: Option<String>,
    #[serde(default)]
    pub regime: Option<String>,
    pub k: usize,
    pub d: usize,
    pub n: usize,
    /// Clip labels in dataset order.
    pub labels: BTreeMap<String, Vec<i64>>,
    /// Fold assignment per label, as stored with the dataset.
    pub folds: BTreeMap<String, Vec<usize>>,
    pub source_ids: Vec<String>,
    /// How `z_k` was formed.
    pub pooling: String,
}

/// Pooled clip vectors `X_k` (`[N, D]`) for every block, optionally with the
/// token outputs `H_k` (`[N, tokens, D]`, stored as `[N·tokens, D]`).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub meta: EmbeddingMeta,
    pub pooled: Vec<Tensor>,
    pub tokens: Option<Vec<Tensor>>,
    pub n_tokens: usize,
}

/// Column means of `h` accumulated in f64.
pub fn mean_pool(h: &Tensor) -> Vec<f32> {
    let c = h.cols();
    let mut acc = vec![0.0f64; c];
    for r in 0..h.rows() {
        for (a, v) in acc.iter_mut().zip(h.row(r)) {
            *a += *v as f64;
        }
    }
    let n = h.rows().max(1) as f64;
    acc.into_iter().map(|a| (a / n) as f32).collect()
}

/// Run the encoder on the full token sequence of every clip (no masking,
/// centre crop) and collect `X_k` and optionally `H_k`.
pub fn extract_clips(
    model: &BlockModel,
    clips: &[Clip],
    keep_tokens: bool,
) -> Result<(Vec<Tensor>, Option<Vec<Tensor>>)> {
    let grid = *model.grid();
    let positions: Vec<usize> = (0..grid.total()).collect();
    let per_clip: Vec<Result<Vec<Tensor>>> = clips
        .par_iter()
        .map(|clip| {
            let tc = prepare_clip(clip, &grid, AugmentMode::Eval, 0.0, 0, 0)?;
            model.forward_blocks(&tc.tokens, &positions, false)
        })
        .collect();
    let k = model.k();
    let d = model.config().embed_dim();
    let n = clips.len();
    let mut pooled: Vec<Vec<f32>> = vec![Vec::with_capacity(n * d); k];
    let mut tokens: Option<Vec<Vec<f32>>> =
        keep_tokens.then(|| vec![Vec::with_capacity(n * grid.total() * d); k]);
    for hs in per_clip {
        let hs = hs?;
        for (b, h) in hs.iter().enumerate() {
            pooled[b].extend(mean_pool(h));
            if let Some(t) = tokens.as_mut() {
                t[b].extend_from_slice(h.data());
            }
        }
    }
    let pooled = pooled
        .into_iter()
        .map(|v| Tensor::new([n, d], v))
        .collect::<std::result::Result<_, _>>()?;
    let tokens = tokens
        .map(|ts| {
            ts.into_iter()
                .map(|v| Tensor::new([n * grid.total(), d], v))
                .collect::<std::result::Result<Vec<_>, _>>()
        })
        .transpose()?;
    Ok((pooled, tokens))
}

/// Extract embeddings for a whole dataset. The model is only read.
pub fn extract(model: &BlockModel, data: &Dataset, keep_tokens: bool) -> Result<EmbeddingSet> {
    let want = model.config().clip;
    let have = data.dims();
    if have.frames != want.frames
        || have.channels != want.channels
        || have.height < want.height
        || have.width < want.width
    {
        return Err(Error::invalid(format!(
            "dataset clips {:?} do not fit a model built for {:?}",
            have.shape(),
            want.shape()
        )));
    }
    let (pooled, tokens) = extract_clips(model, &data.clips, keep_tokens)?;
    let labels = data
        .label_names()
        .into_iter()
        .map(|name| {
            let v = data.labels(&name).unwrap_or_default();
            (name, v)
        })
        .collect();
    let meta = EmbeddingMeta {
        model_id: model.params_hash(),
        dataset_id: data.manifest()?.checksum,
        checkpoint_path: None,
        dataset_path: None,
        regime: None,
        k: model.k(),
        d: model.config().embed_dim(),
        n: data.len(),
        labels,
        folds: data.folds.clone(),
        source_ids: data.clips.iter().map(|c| c.source_id.clone()).collect(),
        pooling: "token mean of each block output; the last block is taken after its LayerNorm"
            .into(),
    };
    Ok(EmbeddingSet {
        meta,
        pooled,
        tokens,
        n_tokens: model.grid().total(),
    })
}

impl EmbeddingSet {
    pub fn k(&self) -> usize {
        self.meta.k
    }

    pub fn n(&self) -> usize {
        self.meta.n
    }

    pub fn d(&self) -> usize {
        self.meta.d
    }

    pub fn labels(&self, target: &str) -> Result<&[i64]> {
        self.meta
            .labels
            .get(target)
            .map(Vec::as_slice)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "embeddings carry no label `{target}` (available: {})",
                    self.meta.labels.keys().cloned().collect::<Vec<_>>().join(", ")
                ))
            })
    }

    /// Tokens of clip `i` at block `k` as `[n_tokens, D]`.
    pub fn clip_tokens(&self, k: usize, i: usize) -> Result<Tensor> {
        let t = self.tokens.as_ref().ok_or_else(|| {
            Error::invalid("embedding dump has no token tensors; re-extract with tokens retained")
        })?;
        let d = self.d();
        let rows = self.n_tokens;
        let data = t[k].data()[i * rows * d..(i + 1) * rows * d].to_vec();
        Ok(Tensor::new([rows, d], data)?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(EMBEDDING_VERSION);
        w.u64(self.n() as u64);
        w.u64(self.d() as u64);
        w.u64(self.k() as u64);
        w.u32(if self.tokens.is_some() { FLAG_TOKENS } else { 0 });
        w.u64(self.n_tokens as u64);
        for x in &self.pooled {
            w.f32s(x.data());
        }
        if let Some(ts) = &self.tokens {
            for h in ts {
                w.f32s(h.data());
            }
        }
        w.json(&self.meta)?;
        Ok(w.seal())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(path, bytes);
        r.magic(MAGIC)?;
        let at = r.offset();
        let version = r.u32("version")?;
        if version != EMBEDDING_VERSION {
            return Err(r.error(
                at,
                format!("unsupported embedding version {version} (expected {EMBEDDING_VERSION})"),
            ));
        }
        let n = r.len("N")?;
        let d = r.len("D")?;
        let k = r.len("K")?;
        let flags_at = r.offset();
        let flags = r.u32("flags")?;
        if flags & !FLAG_TOKENS != 0 {
            return Err(r.error(flags_at, format!("unknown flags {flags:#x}")));
        }
        let n_tokens = r.len("token count")?;
        let mut pooled = Vec::with_capacity(k);
        for b in 0..k {
            let v = r.f32s(n * d, &format!("X_{}", b + 1))?;
            pooled.push(Tensor::new([n, d], v)?);
        }
        let tokens = if flags & FLAG_TOKENS != 0 {
            let mut ts = Vec::with_capacity(k);
            for b in 0..k {
                let v = r.f32s(n * n_tokens * d, &format!("H_{}", b + 1))?;
                ts.push(Tensor::new([n * n_tokens, d], v)?);
            }
            Some(ts)
        } else {
            None
        };
        let meta_at = r.offset();
        let meta: EmbeddingMeta = r.json("metadata")?;
        if (meta.n, meta.d, meta.k) != (n, d, k) {
            return Err(r.error(
                meta_at,
                format!(
                    "metadata says N={} D={} K={}, header says N={n} D={d} K={k}",
                    meta.n, meta.d, meta.k
                ),
            ));
        }
        r.finish_checked()?;
        Ok(Self {
            meta,
            pooled,
            tokens,
            n_tokens,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, &bytes)
    }

    /// Load and require embedding width `expected_d`.
    pub fn load_with_dim(path: &Path, expected_d: usize) -> Result<Self> {
        let set = Self::load(path)?;
        if set.d() != expected_d {
            return Err(Error::format(
                path,
                format!("embedding width mismatch: expected D={expected_d}, found D={}", set.d()),
            ));
        }
        Ok(set)
    }
}
