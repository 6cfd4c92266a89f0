//! Sequential blockwise, simultaneous blockwise and end-to-end training.
//!
//! All three regimes share one step routine. A regime only decides how far the
//! encoder runs, which decoders contribute a loss, which parameters are
//! trainable and how they are split across optimizer states. Masks, crops and
//! flips are keyed by `(seed, step within stage, position in batch)`, so every
//! regime sees the same masks at the same step.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{augment, AugmentMode, Clip, Dataset};
use crate::error::{Error, Result};
use crate::model::{
    masked_sse_graph, BlockModel, Checkpoint, DecoderLayout, EncodeOptions, ModelConfig,
    ParamOwner, Trainable,
};
use crate::optim::{adamw_step, cosine_lr, AdamWConfig, AdamWState};
use crate::rng::{stream, Subsystem};
use crate::tensor::Tensor;
use crate::tokenizer::{
    gather_visible, sample_mask, tubelet_tokenize, MaskPattern, MaskStrategy, TokenGrid,
    TokenizedClip,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Sequential,
    Simultaneous,
    E2e,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Sequential, Regime::Simultaneous, Regime::E2e];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Sequential => "sequential",
            Regime::Simultaneous => "simultaneous",
            Regime::E2e => "e2e",
        }
    }

    pub fn layout(self) -> DecoderLayout {
        match self {
            Regime::E2e => DecoderLayout::FinalOnly,
            _ => DecoderLayout::PerBlock,
        }
    }

    pub fn isolate(self) -> bool {
        self != Regime::E2e
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown regime `{s}`")))
    }
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
pub struct TrainConfig {
    pub regime: Regime,
    /// Epochs per stage: sequential runs K stages of this many epochs.
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f32,
    /// Warmup length as a fraction of the steps in a stage.
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
    pub seed: u64,
    /// Save a checkpoint every this many optimizer steps.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

impl TrainConfig {
    pub fn new(regime: Regime, epochs: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            regime,
            epochs,
            batch_size,
            lr: default_lr(),
            warmup_frac: default_warmup(),
            adamw: AdamWConfig::default(),
            mask_ratio: default_mask_ratio(),
            mask_strategy: MaskStrategy::Uniform,
            flip_prob: default_flip(),
            seed,
            checkpoint_every: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::invalid(format!(
                "mask ratio {} must lie in [0, 1) so some tokens stay visible",
                self.mask_ratio
            )));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) || !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::invalid("warmup_frac and flip_prob must lie in [0, 1]"));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::invalid("learning rate must be non-negative"));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::invalid("checkpoint_every must be positive"));
        }
        Ok(())
    }
}

/// One logged loss value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 0-based optimizer step over the whole run.
    pub step: usize,
    /// 1-based stage (always 1 outside sequential training).
    pub stage: usize,
    /// 1-based epoch within the stage.
    pub epoch: usize,
    /// 1-based block whose loss this is.
    pub block: usize,
    pub loss: f64,
    pub lr: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: usize,
    pub epoch: usize,
    pub block: usize,
    pub mean_loss: f64,
}

/// Hashes of frozen encoder blocks around one sequential stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageHashes {
    pub stage: usize,
    /// `(owner, hash before the stage, hash after the stage)`.
    pub frozen: Vec<(String, String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub regime: Regime,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Full passes over the dataset.
    pub passes: usize,
    /// Epochs during which each owner's parameters were updated.
    pub update_epochs: BTreeMap<String, usize>,
    pub stage_hashes: Vec<StageHashes>,
}

impl TrainLog {
    fn new(regime: Regime) -> Self {
        Self {
            regime,
            steps: Vec::new(),
            epochs: Vec::new(),
            passes: 0,
            update_epochs: BTreeMap::new(),
            stage_hashes: Vec::new(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("regime,step,stage,epoch,block,loss,lr\n");
        for r in &self.steps {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                self.regime, r.step, r.stage, r.epoch, r.block, r.loss, r.lr
            ));
        }
        s
    }

    /// Loss of `block` (1-based) at every step where it was recorded.
    pub fn block_losses(&self, block: usize) -> Vec<f64> {
        self.steps
            .iter()
            .filter(|r| r.block == block)
            .map(|r| r.loss)
            .collect()
    }

    pub fn stages(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.steps.iter().map(|r| r.stage).collect();
        s.dedup();
        s
    }
}

/// Where training stands; stored in every checkpoint so a run can resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainProgress {
    pub config: TrainConfig,
    /// 0-based stage in progress.
    pub stage: usize,
    /// Steps already completed in that stage.
    pub step_in_stage: usize,
    pub global_step: usize,
    pub finished: bool,
    pub log: TrainLog,
}

/// Side effects of a run beyond the returned model.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for periodic and final checkpoints plus the loss CSV.
    pub out_dir: Option<PathBuf>,
    /// Continue from this checkpoint instead of a fresh initialisation.
    pub resume: Option<Checkpoint>,
    /// Stop (with a checkpoint) after this many optimizer steps overall.
    pub halt_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: BlockModel,
    pub log: TrainLog,
    /// False when `halt_after` stopped the run early.
    pub finished: bool,
    pub last_checkpoint: Option<PathBuf>,
}

struct Group {
    name: String,
    owners: Vec<ParamOwner>,
    ids: Vec<usize>,
}

struct Stage {
    /// Encoder blocks to run.
    upto: usize,
    /// 0-based blocks whose decoder loss is optimised.
    blocks: Vec<usize>,
    groups: Vec<Group>,
}

fn plan(model: &BlockModel, regime: Regime) -> Vec<Stage> {
    let k = model.k();
    let group = |name: String, owners: Vec<ParamOwner>| {
        let ids = owners.iter().flat_map(|&o| model.param_ids(o)).collect();
        Group { name, owners, ids }
    };
    let pair = |b: usize| vec![ParamOwner::Encoder(b), ParamOwner::Decoder(b)];
    match regime {
        Regime::E2e => {
            let mut owners: Vec<ParamOwner> = (0..k).map(ParamOwner::Encoder).collect();
            owners.push(ParamOwner::Decoder(k - 1));
            vec![Stage {
                upto: k,
                blocks: vec![k - 1],
                groups: vec![group("e2e".into(), owners)],
            }]
        }
        Regime::Simultaneous => vec![Stage {
            upto: k,
            blocks: (0..k).collect(),
            groups: (0..k)
                .map(|b| group(format!("block{}", b + 1), pair(b)))
                .collect(),
        }],
        Regime::Sequential => (0..k)
            .map(|b| Stage {
                upto: b + 1,
                blocks: vec![b],
                groups: vec![group(format!("block{}", b + 1), pair(b))],
            })
            .collect(),
    }
}

/// Crop/flip a clip to the model's frame size and cut it into tubelets.
pub fn prepare_clip(
    clip: &Clip,
    grid: &TokenGrid,
    mode: AugmentMode,
    flip_prob: f64,
    seed: u64,
    counter: u64,
) -> Result<TokenizedClip> {
    let want = grid.clip_dims();
    let have = clip.dims();
    if have.frames != want.frames || have.channels != want.channels {
        return Err(Error::invalid(format!(
            "clip {} has {} frames × {} channels, model expects {} × {}",
            clip.source_id, have.frames, have.channels, want.frames, want.channels
        )));
    }
    let mut rng = stream(seed, Subsystem::Augment, counter);
    let c = augment(clip, (want.height, want.width), flip_prob, mode, &mut rng)?;
    tubelet_tokenize(&c, grid)
}

/// The mask used for the clip at `counter`; identical in every regime.
pub fn training_mask(cfg: &TrainConfig, grid: &TokenGrid, counter: u64) -> Result<MaskPattern> {
    let mut rng = stream(cfg.seed, Subsystem::Mask, counter);
    sample_mask(grid, cfg.mask_ratio, cfg.mask_strategy, &mut rng)
}

/// Losses and gradients of one clip.
#[derive(Debug, Clone)]
pub struct ClipPass {
    /// `scale · SSE_k` for each requested block, in request order.
    pub losses: Vec<f64>,
    /// Gradient of the summed losses for each id in `ids`, in order.
    pub grads: Vec<Vec<f32>>,
}

/// Record one clip, sum the scaled masked-SSE losses of `blocks`, and
/// differentiate with respect to the parameters `ids` of `owners`.
#[allow(clippy::too_many_arguments)]
pub fn clip_pass(
    model: &BlockModel,
    clip: &TokenizedClip,
    mask: &MaskPattern,
    upto: usize,
    isolate: bool,
    blocks: &[usize],
    owners: &[ParamOwner],
    ids: &[usize],
    scale: f32,
) -> Result<ClipPass> {
    let (visible, positions) = gather_visible(&clip.tokens, mask)?;
    let mut g = Graph::new();
    let mut b = model.binder(Trainable::Only(owners.to_vec()));
    let x = g.constant(visible);
    let opts = EncodeOptions {
        isolate,
        upto: Some(upto),
        pinned: None,
    };
    let hs = model.encode(&mut g, &mut b, x, &positions, &opts)?;
    let mut terms = Vec::with_capacity(blocks.len());
    for &k in blocks {
        let pred = model.decode(&mut g, &mut b, k, hs[k], mask)?;
        terms.push(masked_sse_graph(&mut g, pred, &clip.targets, mask, scale)?);
    }
    let losses = terms.iter().map(|&t| g.item(t) as f64).collect();
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    // A loss with no trainable ancestor simply has zero gradient everywhere.
    let mut grads = match g.backward(total) {
        Err(crate::autodiff::AutodiffError::NoGradient) => None,
        other => Some(other?),
    };
    let grads = ids
        .iter()
        .map(|&i| {
            b.var(i)
                .zip(grads.as_mut())
                .and_then(|(v, g)| g.take(v))
                .unwrap_or_else(|| vec![0.0; model.params()[i].len()])
        })
        .collect();
    Ok(ClipPass { losses, grads })
}

fn check_compatible(model: &BlockModel, data: &Dataset) -> Result<()> {
    let want = model.config().clip;
    let have = data.dims();
    if have.frames != want.frames
        || have.channels != want.channels
        || have.height < want.height
        || have.width < want.width
    {
        return Err(Error::invalid(format!(
            "dataset clips {:?} cannot feed a model built for {:?}",
            have.shape(),
            want.shape()
        )));
    }
    if data.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    Ok(())
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, Subsystem::Shuffle, epoch as u64));
    order
}

pub fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

fn save_checkpoint(
    dir: &Path,
    name: &str,
    model: &BlockModel,
    stage: &Stage,
    states: &[AdamWState],
    progress: &TrainProgress,
) -> Result<PathBuf> {
    let groups = stage
        .groups
        .iter()
        .zip(states)
        .map(|(g, s)| (g.name.clone(), g.ids.clone(), s.clone()))
        .collect();
    let ck = Checkpoint::from_model(model, groups, serde_json::to_value(progress)?);
    let path = dir.join(name);
    ck.save(&path)?;
    Ok(path)
}

/// Train under `cfg.regime`.
pub fn train(
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    data: &Dataset,
    opts: TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (mut model, mut progress, mut resumed_states) = match opts.resume {
        Some(ck) => {
            let progress: TrainProgress = serde_json::from_value(ck.meta.extra.clone())
                .map_err(|e| Error::invalid(format!("checkpoint has no training progress: {e}")))?;
            if progress.config != *cfg {
                return Err(Error::invalid(
                    "resume checkpoint was written with a different training config",
                ));
            }
            if ck.meta.config != model_cfg {
                return Err(Error::invalid(
                    "resume checkpoint was written for a different model config",
                ));
            }
            (ck.to_model()?, progress, Some(ck.states))
        }
        None => {
            let model = BlockModel::new(model_cfg, cfg.regime.layout(), cfg.seed)?;
            let progress = TrainProgress {
                config: cfg.clone(),
                stage: 0,
                step_in_stage: 0,
                global_step: 0,
                finished: false,
                log: TrainLog::new(cfg.regime),
            };
            (model, progress, None)
        }
    };
    check_compatible(&model, data)?;
    if model.layout() != cfg.regime.layout() {
        return Err(Error::invalid("checkpoint decoder layout does not match the regime"));
    }
    let grid = *model.grid();
    let stages = plan(&model, cfg.regime);
    let n = data.len();
    let spe = steps_per_epoch(n, cfg.batch_size);
    let stage_steps = cfg.epochs * spe;
    let warmup = (cfg.warmup_frac * stage_steps as f64).round() as usize;
    let decays: Vec<bool> = model.specs().iter().map(|s| s.decays()).collect();
    let mut last_checkpoint = None;

    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    while progress.stage < stages.len() && !progress.finished {
        let stage = &stages[progress.stage];
        let stage_no = progress.stage + 1;
        let ids: Vec<usize> = stage.groups.iter().flat_map(|g| g.ids.clone()).collect();
        let owners: Vec<ParamOwner> = stage.groups.iter().flat_map(|g| g.owners.clone()).collect();
        let mut states: Vec<AdamWState> = match resumed_states.take() {
            Some(s) if progress.step_in_stage > 0 => s,
            _ => stage
                .groups
                .iter()
                .map(|g| AdamWState::new(g.ids.iter().map(|&i| &model.params()[i])))
                .collect(),
        };
        if states.len() != stage.groups.len() {
            return Err(Error::invalid("checkpoint optimizer groups do not match the stage"));
        }
        let frozen: Vec<ParamOwner> = if cfg.regime == Regime::Sequential {
            (0..progress.stage).map(ParamOwner::Encoder).collect()
        } else {
            Vec::new()
        };
        let before: Vec<String> = frozen.iter().map(|&o| model.owner_hash(o)).collect();
        let mut order_epoch = usize::MAX;
        let mut order = Vec::new();

        while progress.step_in_stage < stage_steps {
            let step = progress.step_in_stage;
            let epoch = step / spe;
            if epoch != order_epoch {
                order = epoch_order(cfg.seed, epoch, n);
                order_epoch = epoch;
            }
            let b = step % spe;
            let batch = &order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(n)];
            let lr = cosine_lr(step, stage_steps, cfg.lr, warmup)?;
            let scale = 1.0 / (batch.len() * grid.patch_dim()) as f32;

            let passes: Vec<Result<ClipPass>> = batch
                .par_iter()
                .enumerate()
                .map(|(j, &idx)| {
                    let counter = (step * cfg.batch_size + j) as u64;
                    let tc = prepare_clip(
                        &data.clips[idx],
                        &grid,
                        AugmentMode::Train,
                        cfg.flip_prob,
                        cfg.seed,
                        counter,
                    )?;
                    let mask = training_mask(cfg, &grid, counter)?;
                    let s = scale / mask.n_masked as f32;
                    clip_pass(
                        &model,
                        &tc,
                        &mask,
                        stage.upto,
                        cfg.regime.isolate(),
                        &stage.blocks,
                        &owners,
                        &ids,
                        s,
                    )
                })
                .collect();

            let mut losses = vec![0.0f64; stage.blocks.len()];
            let mut grads: Vec<Vec<f32>> = ids.iter().map(|&i| vec![0.0; model.params()[i].len()]).collect();
            for pass in passes {
                let pass = pass?;
                for (l, v) in losses.iter_mut().zip(&pass.losses) {
                    *l += v;
                }
                for (acc, g) in grads.iter_mut().zip(&pass.grads) {
                    for (a, v) in acc.iter_mut().zip(g) {
                        *a += v;
                    }
                }
            }
            let diverged = |block: usize| Error::Divergence {
                step: progress.global_step,
                block: block + 1,
                checkpoint: last_checkpoint.clone(),
            };
            if let Some(i) = losses.iter().position(|l| !l.is_finite()) {
                return Err(diverged(stage.blocks[i]));
            }

            let mut offset = 0;
            for (gi, group) in stage.groups.iter().enumerate() {
                let span = offset..offset + group.ids.len();
                offset = span.end;
                let grad_refs: Vec<&[f32]> = grads[span].iter().map(Vec::as_slice).collect();
                let dec: Vec<bool> = group.ids.iter().map(|&i| decays[i]).collect();
                let mut params: Vec<Tensor> = group
                    .ids
                    .iter()
                    .map(|&i| std::mem::replace(&mut model.params_mut()[i], Tensor::zeros([0])))
                    .collect();
                let mut refs: Vec<&mut Tensor> = params.iter_mut().collect();
                let res = adamw_step(&mut refs, &grad_refs, &dec, &mut states[gi], lr, &cfg.adamw);
                for (&i, p) in group.ids.iter().zip(params) {
                    model.params_mut()[i] = p;
                }
                if let Err(crate::optim::OptimError::NonFiniteGradient { .. }) = res {
                    return Err(diverged(stage.blocks[gi.min(stage.blocks.len() - 1)]));
                }
                res?;
            }

            for (&k, &loss) in stage.blocks.iter().zip(&losses) {
                progress.log.steps.push(StepRecord {
                    step: progress.global_step,
                    stage: stage_no,
                    epoch: epoch + 1,
                    block: k + 1,
                    loss,
                    lr,
                });
            }
            progress.step_in_stage += 1;
            progress.global_step += 1;

            if progress.step_in_stage % spe == 0 {
                let log = &mut progress.log;
                log.passes += 1;
                for o in &owners {
                    *log.update_epochs.entry(o.label()).or_default() += 1;
                }
                for &k in &stage.blocks {
                    let vals: Vec<f64> = log
                        .steps
                        .iter()
                        .filter(|r| r.stage == stage_no && r.epoch == epoch + 1 && r.block == k + 1)
                        .map(|r| r.loss)
                        .collect();
                    log.epochs.push(EpochRecord {
                        stage: stage_no,
                        epoch: epoch + 1,
                        block: k + 1,
                        mean_loss: vals.iter().sum::<f64>() / vals.len() as f64,
                    });
                }
            }
            if progress.step_in_stage == stage_steps {
                progress.log.stage_hashes.push(StageHashes {
                    stage: stage_no,
                    frozen: frozen
                        .iter()
                        .zip(&before)
                        .map(|(&o, h)| (o.label(), h.clone(), model.owner_hash(o)))
                        .collect(),
                });
                progress.stage += 1;
                progress.step_in_stage = 0;
                progress.finished = progress.stage == stages.len();
            }

            let halt = opts.halt_after == Some(progress.global_step) && !progress.finished;
            let periodic = cfg
                .checkpoint_every
                .is_some_and(|e| progress.global_step % e == 0);
            if let Some(dir) = &opts.out_dir {
                if (periodic || halt) && !progress.finished {
                    // States belong to the stage in progress; a stage that just
                    // ended hands over fresh ones.
                    let (st, sts): (&Stage, Vec<AdamWState>) = if progress.step_in_stage == 0 {
                        let next = &stages[progress.stage];
                        let fresh = next
                            .groups
                            .iter()
                            .map(|g| AdamWState::new(g.ids.iter().map(|&i| &model.params()[i])))
                            .collect();
                        (next, fresh)
                    } else {
                        (stage, states.clone())
                    };
                    let name = format!("step_{:06}.ckpt", progress.global_step);
                    last_checkpoint = Some(save_checkpoint(dir, &name, &model, st, &sts, &progress)?);
                }
            }
            if halt {
                return Ok(TrainOutcome {
                    model,
                    log: progress.log,
                    finished: false,
                    last_checkpoint,
                });
            }
            if progress.step_in_stage == 0 {
                break;
            }
        }
    }

    if let Some(dir) = &opts.out_dir {
        let last = stages.last().expect("at least one stage");
        let path = save_checkpoint(dir, "final.ckpt", &model, last, &[], &progress)?;
        last_checkpoint = Some(path);
        let csv = dir.join("train_log.csv");
        std::fs::write(&csv, progress.log.to_csv()).map_err(|e| Error::io(&csv, e))?;
    }
    Ok(TrainOutcome {
        model,
        log: progress.log,
        finished: true,
        last_checkpoint,
    })
}

fn expect_regime(cfg: &TrainConfig, regime: Regime) -> Result<()> {
    if cfg.regime != regime {
        return Err(Error::invalid(format!(
            "config names regime {}, expected {regime}",
            cfg.regime
        )));
    }
    Ok(())
}

pub fn train_e2e(model_cfg: ModelConfig, cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    expect_regime(cfg, Regime::E2e)?;
    train(model_cfg, cfg, data, TrainOptions::default())
}

pub fn train_simultaneous(
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    data: &Dataset,
) -> Result<TrainOutcome> {
    expect_regime(cfg, Regime::Simultaneous)?;
    train(model_cfg, cfg, data, TrainOptions::default())
}

pub fn train_sequential(
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    data: &Dataset,
) -> Result<TrainOutcome> {
    expect_regime(cfg, Regime::Sequential)?;
    train(model_cfg, cfg, data, TrainOptions::default())
}
