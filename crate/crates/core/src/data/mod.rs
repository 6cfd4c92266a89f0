//! Video clips: synthetic drifting gratings, frame-folder loading,
//! crop/flip augmentation and stratified dataset assembly.

mod augment;
mod dataset;
mod frames;
mod grating;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

pub use augment::{augment, center_crop_offset, flip_horizontal, AugmentMode};
pub use dataset::{
    build_dataset, Dataset, DatasetManifest, DatasetSpec, ExternalSource, GeneratorKind,
};
pub use frames::{load_clip_frames, FrameOffset};
pub use grating::{
    synth_double_grating, synth_grating, DoubleGratingLabels, Factor, GratingGrid, GratingParams,
};

/// Extents of a clip tensor laid out as `[frames, height, width, channels]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClipDims {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ClipDims {
    pub fn new(frames: usize, height: usize, width: usize, channels: usize) -> Self {
        Self {
            frames,
            height,
            width,
            channels,
        }
    }

    pub fn numel(&self) -> usize {
        self.frames * self.height * self.width * self.channels
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.channels]
    }

    #[inline]
    pub fn offset(&self, t: usize, y: usize, x: usize, c: usize) -> usize {
        ((t * self.height + y) * self.width + x) * self.channels + c
    }
}

/// A `T×H×W×C` video with values in `[0, 1]` and categorical labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    frames: Tensor,
    dims: ClipDims,
    pub labels: BTreeMap<String, i64>,
    pub source_id: String,
}

impl Clip {
    pub fn new(
        dims: ClipDims,
        data: Vec<f32>,
        labels: BTreeMap<String, i64>,
        source_id: impl Into<String>,
    ) -> Result<Self, crate::error::ShapeError> {
        let frames = Tensor::new(dims.shape(), data)?;
        Ok(Self {
            frames,
            dims,
            labels,
            source_id: source_id.into(),
        })
    }

    pub fn dims(&self) -> ClipDims {
        self.dims
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn data(&self) -> &[f32] {
        self.frames.data()
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        self.frames.data_mut()
    }

    pub fn pixel(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        self.frames.data()[self.dims.offset(t, y, x, c)]
    }

    /// Same labels and source, different pixels of the same extent.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self, crate::error::ShapeError> {
        Self::new(self.dims, data, self.labels.clone(), self.source_id.clone())
    }
}
