//! Tubelet tokenisation and the spatiotemporal token mask.
//!
//! Tokens are ordered `(t, h, w)` row-major over the token grid; inside a
//! token the tubelet pixels are flattened `(dt, dy, dx, channel)` row-major.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Clip, ClipDims};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tubelet extent `(frames, rows, cols)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Tubelet {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Tubelet {
    pub const fn new(t: usize, h: usize, w: usize) -> Self {
        Self { t, h, w }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub t_tokens: usize,
    pub h_tokens: usize,
    pub w_tokens: usize,
    pub tubelet: Tubelet,
    pub channels: usize,
}

impl TokenGrid {
    pub fn new(dims: ClipDims, tubelet: Tubelet) -> Result<Self> {
        let axes = [
            ("time", dims.frames, tubelet.t),
            ("height", dims.height, tubelet.h),
            ("width", dims.width, tubelet.w),
        ];
        for (axis, extent, size) in axes {
            if size == 0 || extent == 0 || extent % size != 0 {
                return Err(Error::invalid(format!(
                    "{axis} extent {extent} is not divisible by tubelet size {size}"
                )));
            }
        }
        Ok(Self {
            t_tokens: dims.frames / tubelet.t,
            h_tokens: dims.height / tubelet.h,
            w_tokens: dims.width / tubelet.w,
            tubelet,
            channels: dims.channels,
        })
    }

    pub fn total(&self) -> usize {
        self.t_tokens * self.h_tokens * self.w_tokens
    }

    pub fn spatial(&self) -> usize {
        self.h_tokens * self.w_tokens
    }

    pub fn patch_dim(&self) -> usize {
        self.tubelet.t * self.tubelet.h * self.tubelet.w * self.channels
    }

    pub fn clip_dims(&self) -> ClipDims {
        ClipDims::new(
            self.t_tokens * self.tubelet.t,
            self.h_tokens * self.tubelet.h,
            self.w_tokens * self.tubelet.w,
            self.channels,
        )
    }

    pub fn index(&self, t: usize, h: usize, w: usize) -> usize {
        (t * self.h_tokens + h) * self.w_tokens + w
    }

    /// `(t, h, w)` grid coordinates of token `i`.
    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        let w = i % self.w_tokens;
        let h = (i / self.w_tokens) % self.h_tokens;
        let t = i / (self.w_tokens * self.h_tokens);
        (t, h, w)
    }
}

/// Raw tubelets of a clip: encoder input and reconstruction target.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedClip {
    /// `[total_tokens, patch_dim]`.
    pub tokens: Tensor,
    /// Same pixels as `tokens`, used as MSE ground truth.
    pub targets: Tensor,
}

fn check_grid(grid: &TokenGrid, dims: ClipDims) -> Result<()> {
    if grid.clip_dims() != dims {
        let want = grid.clip_dims();
        let axes = [
            ("time", dims.frames, want.frames),
            ("height", dims.height, want.height),
            ("width", dims.width, want.width),
            ("channels", dims.channels, want.channels),
        ];
        let (axis, got, exp) = axes
            .into_iter()
            .find(|(_, a, b)| a != b)
            .expect("some axis differs");
        return Err(Error::invalid(format!(
            "clip {axis} extent {got} does not match token grid ({exp})"
        )));
    }
    Ok(())
}

pub fn tubelet_tokenize(clip: &Clip, grid: &TokenGrid) -> Result<TokenizedClip> {
    let dims = clip.dims();
    check_grid(grid, dims)?;
    let tb = grid.tubelet;
    let c = dims.channels;
    let mut out = Vec::with_capacity(grid.total() * grid.patch_dim());
    let src = clip.data();
    for ti in 0..grid.t_tokens {
        for hi in 0..grid.h_tokens {
            for wi in 0..grid.w_tokens {
                for dt in 0..tb.t {
                    for dy in 0..tb.h {
                        let o = dims.offset(ti * tb.t + dt, hi * tb.h + dy, wi * tb.w, 0);
                        out.extend_from_slice(&src[o..o + tb.w * c]);
                    }
                }
            }
        }
    }
    let tokens = Tensor::new([grid.total(), grid.patch_dim()], out)?;
    Ok(TokenizedClip {
        targets: tokens.clone(),
        tokens,
    })
}

/// Inverse of [`tubelet_tokenize`]: scatter tubelets back into clip layout.
pub fn untokenize(tokens: &Tensor, grid: &TokenGrid) -> Result<Vec<f32>> {
    if tokens.shape() != [grid.total(), grid.patch_dim()] {
        return Err(Error::invalid(format!(
            "token tensor {:?} does not match grid [{}, {}]",
            tokens.shape(),
            grid.total(),
            grid.patch_dim()
        )));
    }
    let dims = grid.clip_dims();
    let tb = grid.tubelet;
    let row = tb.w * dims.channels;
    let mut out = vec![0.0f32; dims.numel()];
    let mut src = tokens.data().chunks(row);
    for ti in 0..grid.t_tokens {
        for hi in 0..grid.h_tokens {
            for wi in 0..grid.w_tokens {
                for dt in 0..tb.t {
                    for dy in 0..tb.h {
                        let o = dims.offset(ti * tb.t + dt, hi * tb.h + dy, wi * tb.w, 0);
                        out[o..o + row].copy_from_slice(src.next().expect("sized above"));
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskStrategy {
    /// Uniform sampling over all grid positions.
    #[default]
    Uniform,
    /// One spatial mask repeated along time.
    Tube,
}

/// Visible/masked assignment over a token grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPattern {
    pub masked: Vec<bool>,
    pub n_masked: usize,
    pub n_visible: usize,
}

impl MaskPattern {
    pub fn from_flags(masked: Vec<bool>) -> Self {
        let n_masked = masked.iter().filter(|&&m| m).count();
        Self {
            n_visible: masked.len() - n_masked,
            n_masked,
            masked,
        }
    }

    pub fn none(total: usize) -> Self {
        Self::from_flags(vec![false; total])
    }

    pub fn total(&self) -> usize {
        self.masked.len()
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&i| !self.masked[i]).collect()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&i| self.masked[i]).collect()
    }
}

/// Nearest integer, ties rounding up.
fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

pub fn sample_mask<R: Rng + ?Sized>(
    grid: &TokenGrid,
    mask_ratio: f64,
    strategy: MaskStrategy,
    rng: &mut R,
) -> Result<MaskPattern> {
    if !(0.0..=1.0).contains(&mask_ratio) {
        return Err(Error::invalid(format!("mask ratio {mask_ratio} outside [0, 1]")));
    }
    let total = grid.total();
    let mut masked = vec![false; total];
    match strategy {
        MaskStrategy::Uniform => {
            let n = round_half_up(mask_ratio * total as f64).min(total);
            for i in rand::seq::index::sample(rng, total, n) {
                masked[i] = true;
            }
        }
        MaskStrategy::Tube => {
            let spatial = grid.spatial();
            let n = round_half_up(mask_ratio * spatial as f64).min(spatial);
            for s in rand::seq::index::sample(rng, spatial, n) {
                for t in 0..grid.t_tokens {
                    masked[t * spatial + s] = true;
                }
            }
        }
    }
    Ok(MaskPattern::from_flags(masked))
}

/// Visible rows in grid order, plus the grid position of each selected row.
pub fn gather_visible(tokens: &Tensor, mask: &MaskPattern) -> Result<(Tensor, Vec<usize>)> {
    if tokens.rows() != mask.total() {
        return Err(Error::invalid(format!(
            "{} tokens but mask covers {}",
            tokens.rows(),
            mask.total()
        )));
    }
    let index = mask.visible_indices();
    let mut data = Vec::with_capacity(index.len() * tokens.cols());
    for &i in &index {
        data.extend_from_slice(tokens.row(i));
    }
    Ok((Tensor::new([index.len(), tokens.cols()], data)?, index))
}

/// Place `rows` at grid positions `index`, zeros elsewhere.
pub fn scatter_rows(rows: &Tensor, index: &[usize], total: usize) -> Result<Tensor> {
    let c = rows.cols();
    if rows.rows() != index.len() {
        return Err(Error::invalid("row count does not match index map"));
    }
    let mut out = Tensor::zeros([total, c]);
    for (k, &i) in index.iter().enumerate() {
        if i >= total {
            return Err(Error::invalid(format!("index {i} outside grid of {total}")));
        }
        out.data_mut()[i * c..(i + 1) * c].copy_from_slice(rows.row(k));
    }
    Ok(out)
}
