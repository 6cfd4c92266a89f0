use std::path::{Path, PathBuf};

use bwssl_core::data::{Dataset, DatasetManifest, DatasetSpec};
use bwssl_core::embeddings::{extract, EmbeddingSet};
use bwssl_core::model::{BlockModel, Checkpoint};
use bwssl_core::training::{train, Regime, TrainOptions, TrainOutcome, TrainProgress};

use crate::config::{ExperimentConfig, Metric};
use crate::failure::{CliResult, Failure};
use crate::report::{run_report, Report, ReportInput, ReportSettings};

fn refuse_overwrite(path: &Path, force: bool) -> CliResult<()> {
    if path.exists() && !force {
        return Err(Failure::usage(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

/// Build a dataset from a spec file and persist it under `out`.
pub fn synth(spec: &Path, out: &Path, seed: Option<u64>, force: bool) -> CliResult<DatasetManifest> {
    if !spec.is_file() {
        return Err(Failure::usage(format!("spec file {} not found", spec.display())));
    }
    let mut spec = DatasetSpec::from_file(spec)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    refuse_overwrite(&out.join("manifest.json"), force)?;
    let data = bwssl_core::data::build_dataset(&spec)?;
    Ok(data.save(out)?)
}

/// Train every configured regime into `<output_dir>/<regime>/`.
pub fn train_all(cfg: &ExperimentConfig, force: bool) -> CliResult<Vec<(Regime, TrainOutcome)>> {
    let model_cfg = cfg.model.model_config()?;
    let data = Dataset::open(cfg.dataset.source())?;
    let mut out = Vec::new();
    for &regime in &cfg.training.regimes {
        let dir = cfg.run_dir(regime);
        refuse_overwrite(&dir.join("final.ckpt"), force)?;
        let tc = cfg.training.train_config(regime, cfg.seed);
        let opts = TrainOptions {
            out_dir: Some(dir),
            ..Default::default()
        };
        let outcome = train(model_cfg, &tc, &data, opts)
            .map_err(Failure::from)
            .map_err(|e| e.context(format!("training regime {regime}")))?;
        out.push((regime, outcome));
    }
    Ok(out)
}

fn progress(ckpt: &Checkpoint) -> Option<TrainProgress> {
    serde_json::from_value(ckpt.meta.extra.clone()).ok()
}

/// Extract block embeddings of `dataset` with the model in `checkpoint`.
pub fn extract_embeddings(
    checkpoint: &Path,
    dataset: &Path,
    out: &Path,
    keep_tokens: bool,
    force: bool,
) -> CliResult<EmbeddingSet> {
    refuse_overwrite(out, force)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.to_model()?;
    let data = Dataset::open(dataset)?;
    let mut set = extract(&model, &data, keep_tokens)
        .map_err(Failure::from)
        .map_err(|e| e.context("dimension mismatch between checkpoint and dataset"))?;
    set.meta.checkpoint_path = Some(absolute(checkpoint).display().to_string());
    set.meta.dataset_path = Some(absolute(dataset).display().to_string());
    set.meta.regime = progress(&ckpt).map(|p| p.config.regime.name().to_string());
    set.save(out)?;
    Ok(set)
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Load one embedding dump and, when model metrics are selected, the model
/// and dataset it came from.
pub fn load_input(
    path: &Path,
    settings: &ReportSettings,
    checkpoint: Option<&Path>,
    dataset: Option<&Path>,
) -> CliResult<ReportInput> {
    let set = EmbeddingSet::load(path)?;
    let ckpt_path = checkpoint
        .map(Path::to_path_buf)
        .or_else(|| set.meta.checkpoint_path.as_ref().map(PathBuf::from));
    let data_path = dataset
        .map(Path::to_path_buf)
        .or_else(|| set.meta.dataset_path.as_ref().map(PathBuf::from));
    let needs_model = settings
        .metrics
        .iter()
        .any(|m| matches!(m, Metric::Mse | Metric::Occlusion));
    let (mut model, mut data, mut seed) = (None, None, None);
    if let Some(p) = ckpt_path.filter(|p| p.exists()) {
        let ckpt = Checkpoint::load(&p)?;
        seed = progress(&ckpt).map(|p| p.config.seed);
        if needs_model {
            let m: BlockModel = ckpt.to_model()?;
            if m.config().embed_dim() != set.d() || m.k() != set.k() {
                return Err(Failure::usage(format!(
                    "{}: checkpoint {} has D={} K={}, embeddings have D={} K={}",
                    path.display(),
                    p.display(),
                    m.config().embed_dim(),
                    m.k(),
                    set.d(),
                    set.k()
                )));
            }
            model = Some(m);
        }
    }
    if needs_model {
        if let Some(p) = data_path.filter(|p| p.exists()) {
            data = Some(Dataset::open(&p)?);
        }
    }
    Ok(ReportInput {
        path: path.to_path_buf(),
        set,
        model,
        dataset: data,
        seed,
    })
}

pub fn report(
    inputs: &[PathBuf],
    settings: &ReportSettings,
    checkpoint: Option<&Path>,
    dataset: Option<&Path>,
    out_dir: &Path,
) -> CliResult<Report> {
    if inputs.is_empty() {
        return Err(Failure::usage("report needs at least one embedding file"));
    }
    if checkpoint.is_some() && inputs.len() > 1 {
        return Err(Failure::usage("--checkpoint applies to a single embedding file"));
    }
    let loaded = inputs
        .iter()
        .map(|p| load_input(p, settings, checkpoint, dataset))
        .collect::<CliResult<Vec<_>>>()?;
    run_report(&loaded, settings, out_dir)
}

/// Embedding dump written by `run` for one regime.
pub fn embeddings_path(cfg: &ExperimentConfig, regime: Regime) -> PathBuf {
    cfg.run_dir(regime).join("embeddings.bin")
}

/// Train, extract and report in one go.
pub fn run(cfg: &ExperimentConfig, force: bool) -> CliResult<Report> {
    let trained = train_all(cfg, force)?;
    let keep_tokens = cfg.diagnostics.metrics.contains(&Metric::Cps);
    let mut inputs = Vec::new();
    for (regime, outcome) in &trained {
        let ckpt = outcome
            .last_checkpoint
            .clone()
            .ok_or_else(|| Failure::Runtime(anyhow::anyhow!("training wrote no checkpoint")))?;
        let out = embeddings_path(cfg, *regime);
        extract_embeddings(&ckpt, cfg.dataset.source(), &out, keep_tokens, force)?;
        inputs.push(out);
    }
    let settings = ReportSettings::from_section(&cfg.diagnostics, cfg.seed);
    report(&inputs, &settings, None, None, &cfg.output_dir.join("report"))
}
