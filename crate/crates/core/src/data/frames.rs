use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;

use super::{Clip, ClipDims};
use crate::error::{Error, Result};

const FRAME_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Where the strided clip window starts inside a video.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameOffset {
    Fixed(usize),
    /// Uniform over every start that keeps the window inside the video.
    Random(u64),
}

fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut frames = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_frame = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| FRAME_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if is_frame {
            frames.push(path);
        }
    }
    frames.sort();
    Ok(frames)
}

fn read_frame(path: &Path, channels: usize, out: &mut Vec<f32>) -> Result<(usize, usize)> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match channels {
        1 => out.extend(img.to_luma8().into_raw().iter().map(|&v| v as f32 / 255.0)),
        3 => out.extend(img.to_rgb8().into_raw().iter().map(|&v| v as f32 / 255.0)),
        c => return Err(Error::invalid(format!("unsupported channel count {c}"))),
    }
    Ok((h, w))
}

/// Read `frames` images spaced `stride` apart from a folder of
/// lexicographically ordered frames. Returns `Ok(None)` when the folder holds
/// fewer than `frames · stride` images.
pub fn load_clip_frames(
    dir: &Path,
    frames: usize,
    stride: usize,
    channels: usize,
    offset: FrameOffset,
) -> Result<Option<Clip>> {
    if frames == 0 || stride == 0 {
        return Err(Error::invalid("frames and stride must be positive"));
    }
    let paths = list_frames(dir)?;
    let span = frames * stride;
    if paths.len() < span {
        return Ok(None);
    }
    // Last usable start keeps index start + (frames-1)·stride in range.
    let max_start = paths.len() - 1 - (frames - 1) * stride;
    let start = match offset {
        FrameOffset::Fixed(o) if o > max_start => {
            return Err(Error::invalid(format!(
                "offset {o} leaves too few frames in {} (max {max_start})",
                dir.display()
            )))
        }
        FrameOffset::Fixed(o) => o,
        FrameOffset::Random(seed) => {
            let mut rng = crate::rng::stream(seed, crate::rng::Subsystem::ClipOffset, 0);
            rng.random_range(0..=max_start)
        }
    };
    let mut data = Vec::new();
    let mut size = None;
    for i in 0..frames {
        let path = &paths[start + i * stride];
        let hw = read_frame(path, channels, &mut data)?;
        match size {
            None => size = Some(hw),
            Some(s) if s != hw => {
                return Err(Error::format(
                    path,
                    format!("frame is {}x{}, expected {}x{}", hw.0, hw.1, s.0, s.1),
                ))
            }
            _ => {}
        }
    }
    let (h, w) = size.expect("at least one frame");
    let dims = ClipDims::new(frames, h, w, channels);
    let clip = Clip::new(dims, data, BTreeMap::new(), dir.display().to_string())?;
    Ok(Some(clip))
}
