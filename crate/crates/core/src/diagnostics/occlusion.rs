use serde::{Deserialize, Serialize};

use super::probe::{cv_probe, ProbeConfig};
use crate::data::{augment, AugmentMode, Clip};
use crate::embeddings::extract_clips;
use crate::error::{Error, Result};
use crate::model::BlockModel;
use crate::rng::{stream, Subsystem};
use crate::tokenizer::TokenGrid;

/// Which patches survive occlusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeepSpec {
    /// One spatial patch (single gratings).
    Single,
    /// One patch in each half of the frame, mirrored about the vertical
    /// midline (double gratings).
    Hemifield,
}

/// `(acc_full − acc_occl) / acc_full`, undefined when `acc_full` is 0.
pub fn occdrop(acc_full: f64, acc_occl: f64) -> Option<f64> {
    (acc_full > 0.0).then(|| (acc_full - acc_occl) / acc_full)
}

/// Every admissible set of kept spatial patches `(row, col)` in token units.
pub fn keep_locations(grid: &TokenGrid, keep: KeepSpec) -> Result<Vec<Vec<(usize, usize)>>> {
    let (h, w) = (grid.h_tokens, grid.w_tokens);
    match keep {
        KeepSpec::Single => Ok((0..h)
            .flat_map(|r| (0..w).map(move |c| vec![(r, c)]))
            .collect()),
        KeepSpec::Hemifield => {
            if w % 2 != 0 {
                return Err(Error::invalid(format!(
                    "hemifield occlusion needs an even number of patch columns, got {w}"
                )));
            }
            Ok((0..h)
                .flat_map(|r| (0..w / 2).map(move |c| vec![(r, c), (r, w - 1 - c)]))
                .collect())
        }
    }
}

/// Zero every pixel outside the kept spatial patches, in all frames.
pub fn occlude_clip(clip: &Clip, grid: &TokenGrid, keep: &[(usize, usize)]) -> Result<Clip> {
    let d = clip.dims();
    if d != grid.clip_dims() {
        return Err(Error::invalid("occlusion expects clips already cropped to the model size"));
    }
    let tb = grid.tubelet;
    let mut data = vec![0.0f32; d.numel()];
    for &(r, c) in keep {
        if r >= grid.h_tokens || c >= grid.w_tokens {
            return Err(Error::invalid(format!("patch ({r}, {c}) outside the token grid")));
        }
        for t in 0..d.frames {
            for y in r * tb.h..(r + 1) * tb.h {
                let o = d.offset(t, y, c * tb.w, 0);
                let n = tb.w * d.channels;
                data[o..o + n].copy_from_slice(&clip.data()[o..o + n]);
            }
        }
    }
    Ok(clip.with_data(data)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionBlock {
    /// 1-based.
    pub block: usize,
    pub acc_full: f64,
    /// Mean over kept-patch locations.
    pub acc_occl: f64,
    /// Missing when `acc_full` is 0.
    pub occdrop: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationAccuracy {
    pub patches: Vec<(usize, usize)>,
    /// Per block.
    pub accuracy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionResult {
    pub target: String,
    pub blocks: Vec<OcclusionBlock>,
    pub locations: Vec<LocationAccuracy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcclusionConfig {
    pub keep: KeepSpec,
    /// Sample this many locations instead of using all of them.
    #[serde(default)]
    pub max_locations: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

/// Probe the full clips, then the same clips with all but the kept patches
/// zeroed, under an identical cross-validated protocol.
pub fn occlude_and_probe(
    model: &BlockModel,
    clips: &[Clip],
    labels: &[i64],
    folds: &[usize],
    target: &str,
    cfg: &OcclusionConfig,
    probe: &ProbeConfig,
) -> Result<OcclusionResult> {
    let grid = *model.grid();
    let want = grid.clip_dims();
    let mut rng = stream(0, Subsystem::Augment, 0);
    let cropped: Vec<Clip> = clips
        .iter()
        .map(|c| augment(c, (want.height, want.width), 0.0, AugmentMode::Eval, &mut rng))
        .collect::<Result<_>>()?;
    let mut locations = keep_locations(&grid, cfg.keep)?;
    if let Some(m) = cfg.max_locations.filter(|&m| m < locations.len()) {
        let mut r = stream(cfg.seed, Subsystem::Subsample, 1);
        let mut pick = rand::seq::index::sample(&mut r, locations.len(), m).into_vec();
        pick.sort_unstable();
        locations = pick.into_iter().map(|i| locations[i].clone()).collect();
    }
    let k = model.k();
    let accuracies = |set: &[Clip]| -> Result<Vec<f64>> {
        let (pooled, _) = extract_clips(model, set, false)?;
        pooled
            .iter()
            .map(|x| Ok(cv_probe(x, labels, folds, target, probe)?.accuracy))
            .collect()
    };
    let full = accuracies(&cropped)?;
    let mut per_loc = Vec::with_capacity(locations.len());
    for patches in locations {
        let occluded: Vec<Clip> = cropped
            .iter()
            .map(|c| occlude_clip(c, &grid, &patches))
            .collect::<Result<_>>()?;
        per_loc.push(LocationAccuracy {
            accuracy: accuracies(&occluded)?,
            patches,
        });
    }
    let blocks = (0..k)
        .map(|b| {
            let occl = per_loc.iter().map(|l| l.accuracy[b]).sum::<f64>() / per_loc.len() as f64;
            OcclusionBlock {
                block: b + 1,
                acc_full: full[b],
                acc_occl: occl,
                occdrop: occdrop(full[b], occl),
            }
        })
        .collect();
    Ok(OcclusionResult {
        target: target.to_string(),
        blocks,
        locations: per_loc,
    })
}
