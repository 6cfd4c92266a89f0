use rand::Rng;

use super::{Clip, ClipDims};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentMode {
    /// Random crop plus Bernoulli horizontal flip, shared by all frames.
    Train,
    /// Center crop, never flipped.
    Eval,
}

/// `(row, col)` offset of a centered `target` window inside `source`.
pub fn center_crop_offset(source: (usize, usize), target: (usize, usize)) -> (usize, usize) {
    ((source.0 - target.0) / 2, (source.1 - target.1) / 2)
}

fn crop(clip: &Clip, top: usize, left: usize, h: usize, w: usize, flip: bool) -> Result<Clip> {
    let src = clip.dims();
    let dims = ClipDims {
        height: h,
        width: w,
        ..src
    };
    let mut data = Vec::with_capacity(dims.numel());
    for t in 0..src.frames {
        for y in 0..h {
            for x in 0..w {
                let sx = if flip { left + w - 1 - x } else { left + x };
                let o = src.offset(t, top + y, sx, 0);
                data.extend_from_slice(&clip.data()[o..o + src.channels]);
            }
        }
    }
    Ok(Clip::new(dims, data, clip.labels.clone(), clip.source_id.clone())?)
}

/// Mirror every frame left to right.
pub fn flip_horizontal(clip: &Clip) -> Clip {
    let d = clip.dims();
    crop(clip, 0, 0, d.height, d.width, true).expect("same extents")
}

/// Crop to `target = (height, width)` and, in training mode, flip with
/// probability `flip_prob`.
pub fn augment<R: Rng + ?Sized>(
    clip: &Clip,
    target: (usize, usize),
    flip_prob: f64,
    mode: AugmentMode,
    rng: &mut R,
) -> Result<Clip> {
    let d = clip.dims();
    if target.0 > d.height || target.1 > d.width {
        return Err(Error::invalid(format!(
            "crop {}x{} larger than source {}x{}",
            target.0, target.1, d.height, d.width
        )));
    }
    match mode {
        AugmentMode::Eval => {
            let (top, left) = center_crop_offset((d.height, d.width), target);
            crop(clip, top, left, target.0, target.1, false)
        }
        AugmentMode::Train => {
            let top = rng.random_range(0..=d.height - target.0);
            let left = rng.random_range(0..=d.width - target.1);
            let flip = flip_prob > 0.0 && rng.random_bool(flip_prob.min(1.0));
            crop(clip, top, left, target.0, target.1, flip)
        }
    }
}
