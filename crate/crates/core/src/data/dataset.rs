use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    augment, load_clip_frames, synth_double_grating, synth_grating, AugmentMode, Clip, ClipDims,
    FrameOffset, GratingGrid, GratingParams,
};
use crate::error::{Error, Result};
use crate::rng::{stream, Subsystem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    Single,
    Double,
    External,
}

/// Frame folders laid out as `root/<class>/<video>/<frame>.png`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalSource {
    pub root: PathBuf,
    pub stride: usize,
}

fn default_channels() -> usize {
    1
}

fn default_folds() -> usize {
    5
}

/// Declarative description of a dataset; everything else is derived from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub generator: GeneratorKind,
    #[serde(default)]
    pub grids: GratingGrid,
    pub count: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub seed: u64,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external: Option<ExternalSource>,
}

impl DatasetSpec {
    pub fn dims(&self) -> ClipDims {
        ClipDims::new(self.frames, self.height, self.width, self.channels)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::invalid("dataset count must be positive"));
        }
        if self.folds < 2 {
            return Err(Error::invalid("need at least 2 folds"));
        }
        let d = self.dims();
        if d.numel() == 0 {
            return Err(Error::invalid(format!("clip extents must be positive: {d:?}")));
        }
        match self.generator {
            GeneratorKind::Single | GeneratorKind::Double => self.grids.validate(),
            GeneratorKind::External => match &self.external {
                Some(e) if e.stride > 0 => Ok(()),
                Some(_) => Err(Error::invalid("external stride must be positive")),
                None => Err(Error::invalid("external generator needs an `external` section")),
            },
        }
    }
}

/// Clips in canonical order plus stratified fold assignments per label.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub clips: Vec<Clip>,
    /// Fold index of every clip, stratified on each label separately.
    pub folds: BTreeMap<String, Vec<usize>>,
}

/// Summary written next to a persisted dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub generator: GeneratorKind,
    pub n_clips: usize,
    pub dims: ClipDims,
    pub folds: usize,
    /// label → category → clip count.
    pub counts: BTreeMap<String, BTreeMap<i64, usize>>,
    pub checksum: String,
}

#[derive(Serialize, Deserialize)]
struct ClipRecord {
    source_id: String,
    labels: BTreeMap<String, i64>,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    spec: DatasetSpec,
    clips: Vec<ClipRecord>,
    folds: BTreeMap<String, Vec<usize>>,
}

const DATASET_FILE: &str = "dataset.json";
const CLIPS_FILE: &str = "clips.bin";
const MANIFEST_FILE: &str = "manifest.json";

fn single_clips(spec: &DatasetSpec) -> Result<Vec<Clip>> {
    let extents = spec.grids.extents();
    (0..spec.count)
        .map(|i| {
            // Mixed-radix enumeration, orientation fastest, keeps every factor balanced.
            let mut rest = i;
            let index = extents.map(|n| {
                let v = rest % n;
                rest /= n;
                v
            });
            let phase = stream(spec.seed, Subsystem::Synth, i as u64)
                .random_range(0.0..std::f64::consts::TAU);
            let params = GratingParams::from_grid(&spec.grids, index, phase)?;
            let mut clip = synth_grating(&params, spec.dims())?;
            clip.source_id = format!("single-{i:05}");
            Ok(clip)
        })
        .collect()
}

fn double_clips(spec: &DatasetSpec) -> Result<Vec<Clip>> {
    let extents = spec.grids.extents();
    (0..spec.count)
        .map(|i| {
            let mut rng = stream(spec.seed, Subsystem::Synth, i as u64);
            let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Result<GratingParams> {
                let index = extents.map(|n| rng.random_range(0..n));
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                GratingParams::from_grid(&spec.grids, index, phase)
            };
            let left = draw(&mut rng)?;
            let right = draw(&mut rng)?;
            let (mut clip, _) = synth_double_grating(&left, &right, spec.dims())?;
            clip.source_id = format!("double-{i:05}");
            Ok(clip)
        })
        .collect()
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn external_clips(spec: &DatasetSpec, src: &ExternalSource) -> Result<Vec<Clip>> {
    let mut clips = Vec::new();
    let mut counter = 0u64;
    for (class, class_dir) in sorted_subdirs(&src.root)?.iter().enumerate() {
        for video in sorted_subdirs(class_dir)? {
            if clips.len() == spec.count {
                return Ok(clips);
            }
            let seed = stream(spec.seed, Subsystem::ClipOffset, counter).random::<u64>();
            counter += 1;
            let offset = FrameOffset::Random(seed);
            let Some(raw) =
                load_clip_frames(&video, spec.frames, src.stride, spec.channels, offset)?
            else {
                continue;
            };
            let mut rng = stream(spec.seed, Subsystem::Augment, counter);
            let mut clip = augment(
                &raw,
                (spec.height, spec.width),
                0.0,
                AugmentMode::Eval,
                &mut rng,
            )?;
            clip.labels.insert("class".into(), class as i64);
            clip.source_id = video
                .strip_prefix(&src.root)
                .unwrap_or(&video)
                .display()
                .to_string();
            clips.push(clip);
        }
    }
    if clips.is_empty() {
        return Err(Error::invalid(format!(
            "no usable videos under {}",
            src.root.display()
        )));
    }
    Ok(clips)
}

/// Assign folds per stratum so fold sizes inside every stratum differ by at
/// most one. Each stratum starts where the previous one stopped, which keeps
/// overall fold sizes balanced too.
fn stratified_folds(labels: &[i64], folds: usize, seed: u64, counter: u64) -> Vec<usize> {
    let mut strata: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        strata.entry(l).or_default().push(i);
    }
    let mut rng = stream(seed, Subsystem::Folds, counter);
    let mut out = vec![0; labels.len()];
    let mut next = 0;
    for members in strata.values_mut() {
        members.shuffle(&mut rng);
        for &m in members.iter() {
            out[m] = next % folds;
            next += 1;
        }
    }
    out
}

/// Generate or load every clip described by `spec`, deterministically.
pub fn build_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let clips = match spec.generator {
        GeneratorKind::Single => single_clips(spec)?,
        GeneratorKind::Double => double_clips(spec)?,
        GeneratorKind::External => {
            external_clips(spec, spec.external.as_ref().expect("validated"))?
        }
    };
    Dataset::from_clips(spec.clone(), clips)
}

impl Dataset {
    /// Wrap clips, computing stratified folds from their labels.
    pub fn from_clips(spec: DatasetSpec, clips: Vec<Clip>) -> Result<Self> {
        let names: Vec<String> = clips
            .first()
            .map(|c| c.labels.keys().cloned().collect())
            .unwrap_or_default();
        let mut folds = BTreeMap::new();
        for (ordinal, name) in names.iter().enumerate() {
            let labels: Vec<i64> = clips
                .iter()
                .map(|c| {
                    c.labels.get(name).copied().ok_or_else(|| {
                        Error::invalid(format!("clip {} lacks label {name}", c.source_id))
                    })
                })
                .collect::<Result<_>>()?;
            folds.insert(
                name.clone(),
                stratified_folds(&labels, spec.folds, spec.seed, ordinal as u64),
            );
        }
        Ok(Self { spec, clips, folds })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn dims(&self) -> ClipDims {
        self.spec.dims()
    }

    pub fn label_names(&self) -> Vec<String> {
        self.folds.keys().cloned().collect()
    }

    pub fn labels(&self, name: &str) -> Option<Vec<i64>> {
        self.clips
            .iter()
            .map(|c| c.labels.get(name).copied())
            .collect()
    }

    fn clip_bytes(&self) -> Vec<u8> {
        let mut bytes = Vec::with_capacity(self.clips.len() * self.dims().numel() * 4);
        for c in &self.clips {
            for v in c.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    fn file_json(&self) -> Result<String> {
        let file = DatasetFile {
            spec: self.spec.clone(),
            clips: self
                .clips
                .iter()
                .map(|c| ClipRecord {
                    source_id: c.source_id.clone(),
                    labels: c.labels.clone(),
                })
                .collect(),
            folds: self.folds.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn manifest(&self) -> Result<DatasetManifest> {
        let mut counts: BTreeMap<String, BTreeMap<i64, usize>> = BTreeMap::new();
        for c in &self.clips {
            for (k, v) in &c.labels {
                *counts.entry(k.clone()).or_default().entry(*v).or_default() += 1;
            }
        }
        let mut h = Sha256::new();
        h.update(self.clip_bytes());
        h.update(self.file_json()?.as_bytes());
        let checksum = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        Ok(DatasetManifest {
            generator: self.spec.generator,
            n_clips: self.clips.len(),
            dims: self.dims(),
            folds: self.spec.folds,
            counts,
            checksum,
        })
    }

    /// Write `dataset.json`, `clips.bin` and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<DatasetManifest> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, bytes: &[u8]| {
            let p = dir.join(name);
            std::fs::write(&p, bytes).map_err(|e| Error::io(p, e))
        };
        write(DATASET_FILE, self.file_json()?.as_bytes())?;
        write(CLIPS_FILE, &self.clip_bytes())?;
        let manifest = self.manifest()?;
        write(MANIFEST_FILE, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(DATASET_FILE);
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let file: DatasetFile =
            serde_json::from_str(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
        let bin_path = dir.join(CLIPS_FILE);
        let bytes = std::fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        let dims = file.spec.dims();
        let per_clip = dims.numel() * 4;
        if bytes.len() != per_clip * file.clips.len() {
            return Err(Error::format(
                &bin_path,
                format!(
                    "expected {} bytes for {} clips, found {}",
                    per_clip * file.clips.len(),
                    file.clips.len(),
                    bytes.len()
                ),
            ));
        }
        let clips = file
            .clips
            .into_iter()
            .zip(bytes.chunks(per_clip.max(1)))
            .map(|(rec, chunk)| {
                let data = chunk
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect();
                Clip::new(dims, data, rec.labels, rec.source_id).map_err(Error::from)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            spec: file.spec,
            clips,
            folds: file.folds,
        })
    }

    /// Load a persisted dataset directory, or build from a spec file.
    pub fn open(path: &Path) -> Result<Self> {
        if path.is_dir() {
            Self::load(path)
        } else {
            build_dataset(&DatasetSpec::from_file(path)?)
        }
    }
}
