use std::path::{Path, PathBuf};

use bwssl_core::data::ClipDims;
use bwssl_core::diagnostics::{OcclusionConfig, ProbeConfig, ReconConfig};
use bwssl_core::model::{DecoderConfig, EncoderConfig, ModelConfig};
use bwssl_core::optim::AdamWConfig;
use bwssl_core::tokenizer::{MaskStrategy, Tubelet};
use bwssl_core::training::{Regime, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::failure::{CliResult, Failure};

/// One experiment: dataset, model, training regimes and diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    #[serde(default)]
    pub diagnostics: DiagnosticsSection,
}

/// Exactly one of a spec file (synthesised on the fly) or a persisted
/// dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    #[serde(default)]
    pub spec: Option<PathBuf>,
    #[serde(default)]
    pub path: Option<PathBuf>,
}

impl DatasetSection {
    pub fn source(&self) -> &Path {
        self.spec.as_deref().or(self.path.as_deref()).expect("validated dataset section")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// 12 layers, width 192, 3 heads.
    Tiny,
    /// 12 layers, width 384, 6 heads.
    Small,
    /// Encoder given explicitly.
    Custom,
}

fn default_tubelet() -> Tubelet {
    Tubelet { t: 2, h: 16, w: 16 }
}

fn default_clip() -> ClipDims {
    ClipDims::new(16, 128, 128, 3)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Preset,
    /// Block count for the named presets.
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub encoder: Option<EncoderConfig>,
    #[serde(default)]
    pub decoder: DecoderConfig,
    #[serde(default = "default_tubelet")]
    pub tubelet: Tubelet,
    #[serde(default = "default_clip")]
    pub clip: ClipDims,
}

impl ModelSection {
    pub fn model_config(&self) -> CliResult<ModelConfig> {
        let encoder = match (self.preset, &self.encoder) {
            (Preset::Custom, Some(e)) => {
                if self.k.is_some_and(|k| k != e.k) {
                    return Err(Failure::usage("model.k disagrees with model.encoder.k"));
                }
                *e
            }
            (Preset::Custom, None) => {
                return Err(Failure::usage("model.preset \"custom\" needs model.encoder"))
            }
            (_, Some(_)) => {
                return Err(Failure::usage(
                    "model.encoder is only allowed with preset \"custom\"",
                ))
            }
            (p, None) => {
                let k = self
                    .k
                    .ok_or_else(|| Failure::usage("model.k is required for named presets"))?;
                if p == Preset::Tiny {
                    EncoderConfig::tiny(k)
                } else {
                    EncoderConfig::small(k)
                }
            }
        };
        let cfg = ModelConfig {
            encoder,
            decoder: self.decoder,
            tubelet: self.tubelet,
            clip: self.clip,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn default_regimes() -> Vec<Regime> {
    Regime::ALL.to_vec()
}
fn default_lr() -> f32 {
    1e-4
}
fn default_warmup() -> f64 {
    0.05
}
fn default_mask_ratio() -> f64 {
    0.9
}
fn default_flip() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    /// Regimes trained one after another, each into its own directory.
    #[serde(default = "default_regimes")]
    pub regimes: Vec<Regime>,
    /// Epochs per stage.
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f32,
    #[serde(default = "default_warmup")]
    pub warmup_frac: f64,
    #[serde(default)]
    pub adamw: AdamWConfig,
    #[serde(default = "default_mask_ratio")]
    pub mask_ratio: f64,
    #[serde(default)]
    pub mask_strategy: MaskStrategy,
    #[serde(default = "default_flip")]
    pub flip_prob: f64,
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

impl TrainingSection {
    pub fn train_config(&self, regime: Regime, seed: u64) -> TrainConfig {
        let mut c = TrainConfig::new(regime, self.epochs, self.batch_size, seed);
        c.lr = self.lr;
        c.warmup_frac = self.warmup_frac;
        c.adamw = self.adamw;
        c.mask_ratio = self.mask_ratio;
        c.mask_strategy = self.mask_strategy;
        c.flip_prob = self.flip_prob;
        c.checkpoint_every = self.checkpoint_every;
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Probe,
    Map,
    Mse,
    Cka,
    Cps,
    Occlusion,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::Probe,
        Metric::Map,
        Metric::Mse,
        Metric::Cka,
        Metric::Cps,
        Metric::Occlusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Probe => "probe",
            Metric::Map => "map",
            Metric::Mse => "mse",
            Metric::Cka => "cka",
            Metric::Cps => "cps",
            Metric::Occlusion => "occlusion",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Metric::ALL.iter().map(|m| m.name()).collect();
                format!("unknown metric {s:?}; expected one of {}", names.join(", "))
            })
    }
}

fn default_metrics() -> Vec<Metric> {
    vec![Metric::Probe, Metric::Map, Metric::Mse, Metric::Cka, Metric::Cps]
}
fn default_cps_clips() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSection {
    #[serde(default = "default_metrics")]
    pub metrics: Vec<Metric>,
    /// Probe and retrieval targets; empty means every label in the data.
    #[serde(default)]
    pub targets: Vec<String>,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub recon: ReconConfig,
    /// Clips subsampled for CPS.
    #[serde(default = "default_cps_clips")]
    pub cps_clips: usize,
    #[serde(default)]
    pub occlusion: Option<OcclusionConfig>,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        Self {
            metrics: default_metrics(),
            targets: Vec::new(),
            probe: ProbeConfig::default(),
            recon: ReconConfig::default(),
            cps_clips: default_cps_clips(),
            occlusion: None,
        }
    }
}

impl ExperimentConfig {
    /// Parse, resolve paths against the file's directory and validate.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.output_dir);
        cfg.dataset.spec.as_mut().map(resolve);
        cfg.dataset.path.as_mut().map(resolve);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        match (&self.dataset.spec, &self.dataset.path) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(Failure::usage("dataset needs exactly one of \"spec\" or \"path\""))
            }
            _ => {}
        }
        let source = self.dataset.source();
        if !source.exists() {
            return Err(Failure::usage(format!(
                "dataset source {} does not exist",
                source.display()
            )));
        }
        self.model.model_config()?;
        if self.training.regimes.is_empty() {
            return Err(Failure::usage("training.regimes is empty"));
        }
        for r in &self.training.regimes {
            self.training.train_config(*r, self.seed).validate()?;
        }
        if self.diagnostics.metrics.contains(&Metric::Occlusion) && self.diagnostics.occlusion.is_none()
        {
            return Err(Failure::usage(
                "metric \"occlusion\" needs a diagnostics.occlusion section",
            ));
        }
        if self.diagnostics.cps_clips == 0 {
            return Err(Failure::usage("diagnostics.cps_clips must be positive"));
        }
        Ok(())
    }

    pub fn run_dir(&self, regime: Regime) -> PathBuf {
        self.output_dir.join(regime.name())
    }
}
