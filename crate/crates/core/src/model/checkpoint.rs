//! Binary checkpoint: magic, format version, a JSON header echoing the model
//! configuration, then every parameter in registry order as little-endian
//! f32, then optional optimizer moments, then a truncated SHA-256.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BlockModel, DecoderLayout, ModelConfig};
use crate::binio::{write_atomic, Reader, Writer};
use crate::data::ClipDims;
use crate::error::{Error, Result};
use crate::optim::AdamWState;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"BWSLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Header describing one saved AdamW state; its moments follow the
/// parameters in the binary body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerGroup {
    pub name: String,
    /// Registry indices of the parameters this state covers, in state order.
    pub param_ids: Vec<usize>,
    pub t: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub layout: DecoderLayout,
    pub k: usize,
    pub dims: ClipDims,
    pub patch_dim: usize,
    pub param_names: Vec<String>,
    pub optimizer: Vec<OptimizerGroup>,
    /// Free-form run state (training progress, run configuration echo).
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<Tensor>,
    /// One state per entry of `meta.optimizer`.
    pub states: Vec<AdamWState>,
}

impl Checkpoint {
    /// Snapshot a model. `states` pairs each optimizer state with a name and
    /// the registry ids it covers.
    pub fn from_model(
        model: &BlockModel,
        states: Vec<(String, Vec<usize>, AdamWState)>,
        extra: serde_json::Value,
    ) -> Self {
        let mut groups = Vec::with_capacity(states.len());
        let mut st = Vec::with_capacity(states.len());
        for (name, ids, s) in states {
            groups.push(OptimizerGroup {
                name,
                param_ids: ids,
                t: s.t,
            });
            st.push(s);
        }
        Self {
            meta: CheckpointMeta {
                config: *model.config(),
                layout: model.layout(),
                k: model.k(),
                dims: model.config().clip,
                patch_dim: model.grid().patch_dim(),
                param_names: model.specs().iter().map(|s| s.name.clone()).collect(),
                optimizer: groups,
                extra,
            },
            params: model.params().to_vec(),
            states: st,
        }
    }

    pub fn to_model(&self) -> Result<BlockModel> {
        BlockModel::from_parts(self.meta.config, self.meta.layout, self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.json(&self.meta)?;
        for p in &self.params {
            w.f32s(p.data());
        }
        for s in &self.states {
            for m in &s.m {
                w.f32s(m);
            }
            for v in &s.v {
                w.f32s(v);
            }
        }
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
        if version != CHECKPOINT_VERSION {
            return Err(r.error(
                at,
                format!("unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"),
            ));
        }
        let header_at = r.offset();
        let meta: CheckpointMeta = r.json("header")?;
        let arch = super::architecture(&meta.config, meta.layout);
        if meta.k != meta.config.k() || meta.dims != meta.config.clip {
            return Err(r.error(header_at, "header K or dims disagree with its config"));
        }
        let names: Vec<&str> = arch.specs.iter().map(|s| s.name.as_str()).collect();
        if names != meta.param_names.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(r.error(
                header_at,
                "parameter registry in header does not match the configured architecture",
            ));
        }
        let mut params = Vec::with_capacity(arch.specs.len());
        for s in &arch.specs {
            let data = r.f32s(s.numel(), &s.name)?;
            params.push(Tensor::new(s.shape.clone(), data)?);
        }
        let mut states = Vec::with_capacity(meta.optimizer.len());
        for g in &meta.optimizer {
            if let Some(&bad) = g.param_ids.iter().find(|&&i| i >= params.len()) {
                return Err(r.error(
                    header_at,
                    format!("optimizer group {} names parameter {bad}", g.name),
                ));
            }
            let mut read = |kind: &str| -> Result<Vec<Vec<f32>>> {
                g.param_ids
                    .iter()
                    .map(|&i| r.f32s(params[i].len(), &format!("{} {kind} for {}", g.name, names[i])))
                    .collect()
            };
            let m = read("m")?;
            let v = read("v")?;
            states.push(AdamWState { m, v, t: g.t });
        }
        r.finish_checked()?;
        Ok(Self {
            meta,
            params,
            states,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, &bytes)
    }
}
