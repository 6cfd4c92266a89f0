use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::commands;
use crate::config::{ExperimentConfig, Metric};
use crate::failure::{CliResult, Failure};
use crate::report::ReportSettings;

#[derive(Debug, Parser)]
#[command(name = "bwssl-lab", version, about = "Blockwise vs end-to-end masked video autoencoder lab")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Experiment config file (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override the global seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file or directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Require bit-reproducible results. Every reduction in this tool is
    /// already ordered, so results never depend on the thread count.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Worker threads.
    #[arg(long, global = true, env = "BWSSL_LAB_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesise a grating dataset from a spec file.
    Synth {
        /// Dataset spec; defaults to the config's dataset.spec.
        spec: Option<PathBuf>,
    },
    /// Train every regime named in the config.
    Train,
    /// Extract block embeddings with a trained checkpoint.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory or spec file.
        #[arg(long)]
        dataset: PathBuf,
        /// Also store per-token outputs (needed for CPS).
        #[arg(long)]
        keep_tokens: bool,
    },
    /// Compute diagnostics and write the CSV, JSON summary and charts.
    Report {
        /// Embedding dumps; default to those written by `run` for the config.
        inputs: Vec<PathBuf>,
        /// Comma-separated metrics: probe, map, mse, cka, cps, occlusion.
        #[arg(long, value_delimiter = ',')]
        metrics: Option<Vec<Metric>>,
        /// Comma-separated probe and retrieval targets.
        #[arg(long, value_delimiter = ',')]
        targets: Option<Vec<String>>,
        /// Checkpoint for model-based metrics, if not recorded in the dump.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset for model-based metrics, if not recorded in the dump.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Train, extract and report for a config.
    Run,
}

fn load_config(g: &GlobalArgs) -> CliResult<Option<ExperimentConfig>> {
    let Some(path) = &g.config else {
        return Ok(None);
    };
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.output_dir = o.clone();
    }
    Ok(Some(cfg))
}

fn require_config(cfg: Option<ExperimentConfig>, cmd: &str) -> CliResult<ExperimentConfig> {
    cfg.ok_or_else(|| Failure::usage(format!("`{cmd}` needs --config")))
}

fn require_out<'a>(g: &'a GlobalArgs, cmd: &str) -> CliResult<&'a Path> {
    g.out
        .as_deref()
        .ok_or_else(|| Failure::usage(format!("`{cmd}` needs --out")))
}

pub fn execute(cli: Cli) -> CliResult<()> {
    let g = &cli.global;
    if let Some(n) = g.threads {
        if n == 0 {
            return Err(Failure::usage("--threads must be positive"));
        }
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let cfg = load_config(g)?;
    match cli.command {
        Command::Synth { spec } => {
            let spec = spec
                .or_else(|| cfg.as_ref().and_then(|c| c.dataset.spec.clone()))
                .ok_or_else(|| Failure::usage("`synth` needs a spec file"))?;
            let out = require_out(g, "synth")?;
            let manifest = commands::synth(&spec, out, g.seed, g.force)?;
            println!("{}", serde_json::to_string_pretty(&manifest)?);
        }
        Command::Train => {
            let cfg = require_config(cfg, "train")?;
            for (regime, outcome) in commands::train_all(&cfg, g.force)? {
                let ckpt = outcome.last_checkpoint.unwrap_or_default();
                println!("{regime}: {}", ckpt.display());
            }
        }
        Command::Extract {
            checkpoint,
            dataset,
            keep_tokens,
        } => {
            let out = require_out(g, "extract")?;
            let set = commands::extract_embeddings(&checkpoint, &dataset, out, keep_tokens, g.force)?;
            println!("{} (N={}, D={}, K={})", out.display(), set.n(), set.d(), set.k());
        }
        Command::Report {
            inputs,
            metrics,
            targets,
            checkpoint,
            dataset,
        } => {
            let seed = g.seed.or(cfg.as_ref().map(|c| c.seed)).unwrap_or(0);
            let mut settings = match &cfg {
                Some(c) => ReportSettings::from_section(&c.diagnostics, seed),
                None => ReportSettings::from_section(&Default::default(), seed),
            };
            if let Some(m) = metrics {
                settings.metrics = m;
            }
            if let Some(t) = targets {
                settings.targets = t;
            }
            let inputs = if inputs.is_empty() {
                let c = cfg
                    .as_ref()
                    .ok_or_else(|| Failure::usage("`report` needs embedding files or --config"))?;
                c.training
                    .regimes
                    .iter()
                    .map(|r| commands::embeddings_path(c, *r))
                    .collect()
            } else {
                inputs
            };
            let out = match &cfg {
                Some(c) => c.output_dir.join("report"),
                None => require_out(g, "report")?.to_path_buf(),
            };
            let r = commands::report(&inputs, &settings, checkpoint.as_deref(), dataset.as_deref(), &out)?;
            println!("{}", r.csv_path.display());
            println!("{}", r.json_path.display());
            for c in &r.charts {
                println!("{}", c.display());
            }
        }
        Command::Run => {
            let cfg = require_config(cfg, "run")?;
            let r = commands::run(&cfg, g.force)?;
            println!("{}", r.csv_path.display());
        }
    }
    Ok(())
}
