use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{Clip, ClipDims};
use crate::error::{Error, Result};

/// The four categorical stimulus factors of a grating.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Factor {
    Orientation,
    SpatialFrequency,
    TemporalFrequency,
    Contrast,
}

impl Factor {
    pub const ALL: [Factor; 4] = [
        Factor::Orientation,
        Factor::SpatialFrequency,
        Factor::TemporalFrequency,
        Factor::Contrast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Factor::Orientation => "orientation",
            Factor::SpatialFrequency => "spatial_frequency",
            Factor::TemporalFrequency => "temporal_frequency",
            Factor::Contrast => "contrast",
        }
    }
}

/// Finite value grids for each factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GratingGrid {
    /// Degrees.
    pub orientation: Vec<f64>,
    /// Cycles per frame width.
    pub spatial_frequency: Vec<f64>,
    /// Cycles per clip.
    pub temporal_frequency: Vec<f64>,
    pub contrast: Vec<f64>,
}

impl Default for GratingGrid {
    fn default() -> Self {
        Self {
            orientation: vec![0.0, 45.0, 90.0, 135.0],
            spatial_frequency: vec![2.0, 4.0, 8.0],
            temporal_frequency: vec![1.0, 2.0, 4.0],
            contrast: vec![0.25, 0.5, 1.0],
        }
    }
}

impl GratingGrid {
    pub fn values(&self, f: Factor) -> &[f64] {
        match f {
            Factor::Orientation => &self.orientation,
            Factor::SpatialFrequency => &self.spatial_frequency,
            Factor::TemporalFrequency => &self.temporal_frequency,
            Factor::Contrast => &self.contrast,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for f in Factor::ALL {
            if self.values(f).is_empty() {
                return Err(Error::invalid(format!("grid for {} is empty", f.name())));
            }
        }
        if let Some(c) = self.contrast.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(Error::invalid(format!("contrast {c} outside [0, 1]")));
        }
        Ok(())
    }

    /// Number of grid points along each factor, in [`Factor::ALL`] order.
    pub fn extents(&self) -> [usize; 4] {
        Factor::ALL.map(|f| self.values(f).len())
    }
}

/// One grating, stored as grid indices plus the resolved values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GratingParams {
    pub orientation: f64,
    pub spatial_frequency: f64,
    pub temporal_frequency: f64,
    pub contrast: f64,
    /// Radians. Randomised per clip, never a probe target.
    pub phase: f64,
    /// Grid index per factor, in [`Factor::ALL`] order.
    pub index: [usize; 4],
}

impl GratingParams {
    pub fn from_grid(grid: &GratingGrid, index: [usize; 4], phase: f64) -> Result<Self> {
        for (f, &i) in Factor::ALL.iter().zip(&index) {
            let n = grid.values(*f).len();
            if i >= n {
                return Err(Error::invalid(format!(
                    "{} index {i} outside grid of {n}",
                    f.name()
                )));
            }
        }
        Ok(Self {
            orientation: grid.orientation[index[0]],
            spatial_frequency: grid.spatial_frequency[index[1]],
            temporal_frequency: grid.temporal_frequency[index[2]],
            contrast: grid.contrast[index[3]],
            phase,
            index,
        })
    }

    pub fn grid_index(&self, f: Factor) -> usize {
        self.index[f as usize]
    }

    fn labels(&self, prefix: &str) -> BTreeMap<String, i64> {
        Factor::ALL
            .iter()
            .map(|f| (format!("{prefix}{}", f.name()), self.grid_index(*f) as i64))
            .collect()
    }

    /// Luminance at column `x`, row `y`, frame `t`; `width` and `frames`
    /// normalise the spatial and temporal frequencies.
    fn luminance(&self, x: usize, y: usize, t: usize, width: usize, frames: usize) -> f32 {
        let theta = self.orientation.to_radians();
        let spatial = self.spatial_frequency * (x as f64 * theta.cos() + y as f64 * theta.sin())
            / width as f64;
        let temporal = self.temporal_frequency * t as f64 / frames as f64;
        let v = 0.5 + 0.5 * self.contrast * (2.0 * PI * (spatial - temporal) + self.phase).sin();
        v.clamp(0.0, 1.0) as f32
    }

    fn check(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.contrast) {
            return Err(Error::invalid(format!(
                "contrast {} outside [0, 1]",
                self.contrast
            )));
        }
        Ok(())
    }
}

fn check_dims(dims: ClipDims) -> Result<()> {
    if dims.frames == 0 || dims.height == 0 || dims.width == 0 || dims.channels == 0 {
        return Err(Error::invalid(format!("clip extents must be positive: {dims:?}")));
    }
    Ok(())
}

/// Full-field drifting sinusoidal grating; channels carry identical luminance.
pub fn synth_grating(params: &GratingParams, dims: ClipDims) -> Result<Clip> {
    params.check()?;
    check_dims(dims)?;
    let mut data = vec![0.0f32; dims.numel()];
    for t in 0..dims.frames {
        for y in 0..dims.height {
            for x in 0..dims.width {
                let v = params.luminance(x, y, t, dims.width, dims.frames);
                let o = dims.offset(t, y, x, 0);
                data[o..o + dims.channels].fill(v);
            }
        }
    }
    Ok(Clip::new(dims, data, params.labels(""), "grating")?)
}

/// Relational labels for a left/right pair of gratings.
#[derive(Debug, Clone, PartialEq)]
pub struct DoubleGratingLabels {
    pub left: GratingParams,
    pub right: GratingParams,
    /// Per factor, in [`Factor::ALL`] order.
    pub match_flags: [bool; 4],
    /// Left grid index minus right grid index, per factor.
    pub signed_diffs: [i64; 4],
}

impl DoubleGratingLabels {
    pub fn new(left: GratingParams, right: GratingParams) -> Self {
        let match_flags = Factor::ALL.map(|f| left.grid_index(f) == right.grid_index(f));
        let signed_diffs =
            Factor::ALL.map(|f| left.grid_index(f) as i64 - right.grid_index(f) as i64);
        Self {
            left,
            right,
            match_flags,
            signed_diffs,
        }
    }

    pub fn to_labels(&self) -> BTreeMap<String, i64> {
        let mut labels = self.left.labels("left_");
        labels.extend(self.right.labels("right_"));
        for (i, f) in Factor::ALL.iter().enumerate() {
            labels.insert(format!("match_{}", f.name()), self.match_flags[i] as i64);
            labels.insert(format!("diff_{}", f.name()), self.signed_diffs[i]);
        }
        labels
    }
}

/// Two gratings in the left (`x < W/2`) and right hemifields. Both share the
/// full-frame coordinate system, so each half is a window onto its own
/// full-field grating.
pub fn synth_double_grating(
    left: &GratingParams,
    right: &GratingParams,
    dims: ClipDims,
) -> Result<(Clip, DoubleGratingLabels)> {
    left.check()?;
    right.check()?;
    check_dims(dims)?;
    if dims.width % 2 != 0 {
        return Err(Error::invalid(format!(
            "double grating needs an even width, got {}",
            dims.width
        )));
    }
    let half = dims.width / 2;
    let mut data = vec![0.0f32; dims.numel()];
    for t in 0..dims.frames {
        for y in 0..dims.height {
            for x in 0..dims.width {
                let p = if x < half { left } else { right };
                let v = p.luminance(x, y, t, dims.width, dims.frames);
                let o = dims.offset(t, y, x, 0);
                data[o..o + dims.channels].fill(v);
            }
        }
    }
    let labels = DoubleGratingLabels::new(*left, *right);
    let clip = Clip::new(dims, data, labels.to_labels(), "double_grating")?;
    Ok((clip, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(index: [usize; 4], phase: f64) -> GratingParams {
        GratingParams::from_grid(&GratingGrid::default(), index, phase).unwrap()
    }

    const DIMS: ClipDims = ClipDims {
        frames: 4,
        height: 16,
        width: 16,
        channels: 1,
    };

    #[test]
    fn zero_contrast_is_uniform_grey() {
        let grid = GratingGrid {
            contrast: vec![0.0],
            ..Default::default()
        };
        let p = GratingParams::from_grid(&grid, [1, 1, 1, 0], 0.3).unwrap();
        let clip = synth_grating(&p, DIMS).unwrap();
        assert!(clip.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn zero_temporal_frequency_freezes_frames() {
        let grid = GratingGrid {
            temporal_frequency: vec![0.0],
            ..Default::default()
        };
        let p = GratingParams::from_grid(&grid, [1, 1, 0, 2], 1.0).unwrap();
        let clip = synth_grating(&p, DIMS).unwrap();
        let frame = DIMS.height * DIMS.width;
        for t in 1..DIMS.frames {
            assert_eq!(clip.data()[..frame], clip.data()[t * frame..(t + 1) * frame]);
        }
    }

    #[test]
    fn orthogonal_orientations_are_transposes() {
        let a = synth_grating(&params([0, 1, 1, 2], 0.2), DIMS).unwrap();
        let b = synth_grating(&params([2, 1, 1, 2], 0.2), DIMS).unwrap();
        for t in 0..DIMS.frames {
            for y in 0..DIMS.height {
                for x in 0..DIMS.width {
                    let d = (a.pixel(t, y, x, 0) - b.pixel(t, x, y, 0)).abs();
                    assert!(d < 1e-6, "t={t} y={y} x={x} d={d}");
                }
            }
        }
    }

    #[test]
    fn labels_are_grid_indices() {
        let clip = synth_grating(&params([3, 0, 2, 1], 0.0), DIMS).unwrap();
        assert_eq!(clip.labels["orientation"], 3);
        assert_eq!(clip.labels["spatial_frequency"], 0);
        assert_eq!(clip.labels["temporal_frequency"], 2);
        assert_eq!(clip.labels["contrast"], 1);
    }

    #[test]
    fn contrast_outside_unit_interval_rejected() {
        let mut p = params([0, 0, 0, 0], 0.0);
        p.contrast = 1.5;
        assert!(synth_grating(&p, DIMS).is_err());
        let grid = GratingGrid {
            contrast: vec![-0.1],
            ..Default::default()
        };
        assert!(grid.validate().is_err());
    }

    #[test]
    fn identical_hemifields_all_match() {
        let p = params([1, 2, 0, 1], 0.5);
        let (_, labels) = synth_double_grating(&p, &p, DIMS).unwrap();
        assert_eq!(labels.match_flags, [true; 4]);
        assert_eq!(labels.signed_diffs, [0; 4]);
    }

    #[test]
    fn signed_difference_is_left_minus_right() {
        let (clip, labels) =
            synth_double_grating(&params([2, 0, 0, 0], 0.0), &params([0, 0, 0, 0], 0.0), DIMS)
                .unwrap();
        assert_eq!(labels.signed_diffs[0], 2);
        assert_eq!(clip.labels["diff_orientation"], 2);
        assert_eq!(clip.labels["match_orientation"], 0);
        assert_eq!(clip.labels["match_contrast"], 1);
    }

    #[test]
    fn zero_contrast_pair_is_uniform_but_labelled() {
        let grid = GratingGrid {
            contrast: vec![0.0],
            ..Default::default()
        };
        let l = GratingParams::from_grid(&grid, [0, 0, 0, 0], 0.1).unwrap();
        let r = GratingParams::from_grid(&grid, [3, 2, 2, 0], 2.0).unwrap();
        let (clip, _) = synth_double_grating(&l, &r, DIMS).unwrap();
        assert!(clip.data().iter().all(|&v| v == 0.5));
        assert_eq!(clip.labels["right_orientation"], 3);
        assert_eq!(clip.labels.len(), 16);
    }

    #[test]
    fn odd_width_rejected() {
        let p = params([0, 0, 0, 0], 0.0);
        let dims = ClipDims { width: 15, ..DIMS };
        assert!(synth_double_grating(&p, &p, dims).is_err());
    }

    #[test]
    fn right_params_do_not_touch_left_half() {
        let l = params([1, 1, 1, 1], 0.4);
        let (a, _) = synth_double_grating(&l, &params([0, 0, 0, 0], 0.0), DIMS).unwrap();
        let (b, _) = synth_double_grating(&l, &params([3, 2, 2, 2], 1.3), DIMS).unwrap();
        for t in 0..DIMS.frames {
            for y in 0..DIMS.height {
                for x in 0..DIMS.width / 2 {
                    assert_eq!(a.pixel(t, y, x, 0).to_bits(), b.pixel(t, y, x, 0).to_bits());
                }
            }
        }
    }
}
