use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{AugmentMode, Clip};
use crate::error::{Error, Result};
use crate::model::BlockModel;
use crate::rng::{stream, Subsystem};
use crate::tokenizer::{gather_visible, sample_mask, MaskStrategy};
use crate::training::prepare_clip;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconConfig {
    pub mask_ratio: f64,
    #[serde(default)]
    pub mask_strategy: MaskStrategy,
    /// Seed of the evaluation masks; clip `i` always gets the same mask.
    pub seed: u64,
    /// Clips evaluated per parallel chunk. Does not affect the result.
    pub batch_size: usize,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.9,
            mask_strategy: MaskStrategy::Uniform,
            seed: 0,
            batch_size: 16,
        }
    }
}

/// Masked reconstruction MSE of each decoder on `clips`, as
/// `(1-based block, mse)`. `blocks` are 0-based; `None` means every block
/// that has a decoder.
pub fn recon_mse_profile(
    model: &BlockModel,
    clips: &[Clip],
    blocks: Option<&[usize]>,
    cfg: &ReconConfig,
) -> Result<Vec<(usize, f64)>> {
    let blocks: Vec<usize> = match blocks {
        Some(b) => b.to_vec(),
        None => model.decoder_blocks(),
    };
    for &k in &blocks {
        if !model.has_decoder(k) {
            return Err(Error::invalid(format!(
                "no intermediate decoders: this model cannot report MSE at block {}",
                k + 1
            )));
        }
    }
    if clips.is_empty() {
        return Err(Error::invalid("reconstruction profile over an empty clip set"));
    }
    let grid = *model.grid();
    let per_clip = |i: usize, clip: &Clip| -> Result<(Vec<f64>, usize)> {
        let tc = prepare_clip(clip, &grid, AugmentMode::Eval, 0.0, 0, 0)?;
        let mut rng = stream(cfg.seed, Subsystem::EvalMask, i as u64);
        let mask = sample_mask(&grid, cfg.mask_ratio, cfg.mask_strategy, &mut rng)?;
        if mask.n_masked == 0 {
            return Err(Error::invalid("evaluation mask hides no tokens; MSE undefined"));
        }
        let (vis, pos) = gather_visible(&tc.tokens, &mask)?;
        let hs = model.forward_blocks(&vis, &pos, true)?;
        let masked = mask.masked_indices();
        let sse = blocks
            .iter()
            .map(|&k| {
                let pred = model.decode_block(k, &hs[k], &mask)?;
                let mut s = 0.0f64;
                for (row, &t) in masked.iter().enumerate() {
                    for (a, b) in pred.row(row).iter().zip(tc.targets.row(t)) {
                        let d = (*a - *b) as f64;
                        s += d * d;
                    }
                }
                Ok(s)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((sse, mask.n_masked * grid.patch_dim()))
    };
    let mut totals = vec![0.0f64; blocks.len()];
    let mut count = 0usize;
    let chunk = cfg.batch_size.max(1);
    for start in (0..clips.len()).step_by(chunk) {
        let end = (start + chunk).min(clips.len());
        let results: Vec<Result<(Vec<f64>, usize)>> = (start..end)
            .into_par_iter()
            .map(|i| per_clip(i, &clips[i]))
            .collect();
        // Accumulate clip by clip so the chunk size never changes rounding.
        for r in results {
            let (sse, n) = r?;
            for (t, s) in totals.iter_mut().zip(sse) {
                *t += s;
            }
            count += n;
        }
    }
    Ok(blocks
        .iter()
        .zip(totals)
        .map(|(&k, t)| (k + 1, t / count as f64))
        .collect())
}
