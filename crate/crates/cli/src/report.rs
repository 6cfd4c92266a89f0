//! MetricReport assembly: CSV rows, a JSON summary and SVG charts.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use bwssl_core::data::Dataset;
use bwssl_core::diagnostics::{
    cka, cps, cv_probe, knn_map, occlude_and_probe, pair_cka_dmap, recon_mse_profile,
    OcclusionConfig, ProbeConfig, ReconConfig,
};
use bwssl_core::embeddings::EmbeddingSet;
use bwssl_core::model::BlockModel;
use bwssl_core::rng::{stream, Subsystem};
use serde::{Deserialize, Serialize};

use crate::config::{DiagnosticsSection, Metric};
use crate::failure::{CliResult, Failure};
use crate::svg::{chart, Series, Style};

/// One CSV line. `value` is empty when a metric is undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub regime: String,
    pub model: String,
    #[serde(rename = "K")]
    pub k: usize,
    /// 1-based; for transition metrics the source block.
    pub block: usize,
    pub metric: String,
    pub target: String,
    pub value: Option<f64>,
    pub seed: u64,
}

/// What the report computes and how.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportSettings {
    pub metrics: Vec<Metric>,
    pub targets: Vec<String>,
    pub probe: ProbeConfig,
    pub recon: ReconConfig,
    pub cps_clips: usize,
    pub occlusion: Option<OcclusionConfig>,
    pub seed: u64,
}

impl ReportSettings {
    pub fn from_section(d: &DiagnosticsSection, seed: u64) -> Self {
        Self {
            metrics: d.metrics.clone(),
            targets: d.targets.clone(),
            probe: d.probe,
            recon: ReconConfig { seed, ..d.recon },
            cps_clips: d.cps_clips,
            occlusion: d.occlusion.clone(),
            seed,
        }
    }

    fn wants(&self, m: Metric) -> bool {
        self.metrics.contains(&m)
    }
}

/// One embedding dump plus what model-based metrics need.
pub struct ReportInput {
    pub path: PathBuf,
    pub set: EmbeddingSet,
    pub model: Option<BlockModel>,
    pub dataset: Option<Dataset>,
    /// Training seed when known.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Total {
    pub count: usize,
    pub missing: usize,
    pub sum: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub fits: usize,
    /// Fits that met the gradient tolerance.
    pub converged: usize,
    /// Fits that used the whole iteration budget instead.
    pub budget_exhausted: usize,
    pub max_grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rows: Vec<MetricRow>,
    /// Per metric: defined-value count, missing count and sum, in row order.
    pub totals: BTreeMap<String, Total>,
    pub probe_solver: SolverStats,
}

impl Summary {
    pub fn new(rows: Vec<MetricRow>, probe_solver: SolverStats) -> Self {
        Self {
            totals: totals(&rows),
            rows,
            probe_solver,
        }
    }
}

pub fn totals(rows: &[MetricRow]) -> BTreeMap<String, Total> {
    let mut t: BTreeMap<String, Total> = BTreeMap::new();
    for r in rows {
        let e = t.entry(r.metric.clone()).or_default();
        match r.value {
            Some(v) => {
                e.count += 1;
                e.sum += v;
            }
            None => e.missing += 1,
        }
    }
    t
}

fn targets_for(set: &EmbeddingSet, wanted: &[String]) -> CliResult<Vec<String>> {
    if wanted.is_empty() {
        // Constant labels (a factor with one level) carry nothing to decode.
        return Ok(set
            .meta
            .labels
            .iter()
            .filter(|(_, v)| v.iter().any(|x| *x != v[0]))
            .map(|(k, _)| k.clone())
            .collect());
    }
    for t in wanted {
        set.labels(t)?;
    }
    Ok(wanted.to_vec())
}

fn folds_for<'a>(set: &'a EmbeddingSet, target: &str) -> CliResult<&'a [usize]> {
    set.meta
        .folds
        .get(target)
        .map(Vec::as_slice)
        .ok_or_else(|| Failure::usage(format!("embeddings carry no fold assignment for `{target}`")))
}

fn need_model<'a>(
    input: &'a ReportInput,
    metric: &str,
) -> CliResult<(&'a BlockModel, &'a Dataset)> {
    match (&input.model, &input.dataset) {
        (Some(m), Some(d)) => Ok((m, d)),
        _ => Err(Failure::usage(format!(
            "{}: metric `{metric}` needs the checkpoint and dataset; none recorded in the \
             embedding metadata and none given with --checkpoint/--dataset",
            input.path.display()
        ))),
    }
}

/// Compute every selected metric for one input, in a fixed row order.
pub fn input_rows(
    input: &ReportInput,
    s: &ReportSettings,
    solver: &mut SolverStats,
) -> CliResult<Vec<MetricRow>> {
    let set = &input.set;
    let k = set.k();
    let regime = set.meta.regime.clone().unwrap_or_else(|| "unknown".into());
    let model: String = set.meta.model_id.chars().take(12).collect();
    let seed = input.seed.unwrap_or(s.seed);
    let row = |block: usize, metric: &str, target: &str, value: Option<f64>| MetricRow {
        regime: regime.clone(),
        model: model.clone(),
        k,
        block,
        metric: metric.into(),
        target: target.into(),
        value,
        seed,
    };
    let targets = targets_for(set, &s.targets)?;
    let mut rows = Vec::new();
    if s.wants(Metric::Probe) {
        for t in &targets {
            let (y, folds) = (set.labels(t)?, folds_for(set, t)?);
            for b in 0..k {
                let r = cv_probe(&set.pooled[b], y, folds, t, &s.probe)?;
                for f in &r.folds {
                    solver.fits += 1;
                    if f.converged {
                        solver.converged += 1;
                    } else if f.iterations >= s.probe.max_iter {
                        solver.budget_exhausted += 1;
                    }
                    solver.max_grad_norm = solver.max_grad_norm.max(f.grad_norm);
                }
                rows.push(row(b + 1, "probe_acc", t, Some(r.accuracy)));
            }
        }
    }
    let mut maps: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    if s.wants(Metric::Map) {
        for t in &targets {
            let y = set.labels(t)?;
            let m: Vec<f64> = (0..k)
                .map(|b| knn_map(&set.pooled[b], y))
                .collect::<Result<_, _>>()?;
            for (b, v) in m.iter().enumerate() {
                rows.push(row(b + 1, "map", t, Some(*v)));
            }
            maps.insert(t, m);
        }
    }
    if s.wants(Metric::Mse) {
        let (m, d) = need_model(input, "mse")?;
        for (block, v) in recon_mse_profile(m, &d.clips, None, &s.recon)? {
            rows.push(row(block, "mse", "", Some(v)));
        }
    }
    if s.wants(Metric::Cka) {
        let c: Vec<f64> = (0..k.saturating_sub(1))
            .map(|b| cka(&set.pooled[b], &set.pooled[b + 1]))
            .collect::<Result<_, _>>()?;
        for (b, v) in c.iter().enumerate() {
            rows.push(row(b + 1, "cka", "", Some(*v)));
        }
        for (t, m) in &maps {
            for tr in pair_cka_dmap(&c, m)? {
                rows.push(row(tr.from, "delta_map", t, Some(tr.delta_map)));
            }
        }
    }
    if s.wants(Metric::Cps) {
        if set.tokens.is_none() {
            return Err(Failure::usage(format!(
                "{}: CPS needs per-token outputs, but this dump holds pooled vectors only; \
                 re-run extract with --keep-tokens",
                input.path.display()
            )));
        }
        let n = set.n();
        let mut clips: Vec<usize> = if n > s.cps_clips {
            let mut r = stream(s.seed, Subsystem::Subsample, 0);
            rand::seq::index::sample(&mut r, n, s.cps_clips).into_vec()
        } else {
            (0..n).collect()
        };
        clips.sort_unstable();
        for b in 0..k {
            let toks = clips
                .iter()
                .map(|&i| set.clip_tokens(b, i))
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(row(b + 1, "cps", "", Some(cps(&toks)?.value)));
        }
    }
    if s.wants(Metric::Occlusion) {
        let occ = s
            .occlusion
            .as_ref()
            .ok_or_else(|| Failure::usage("metric `occlusion` needs occlusion settings"))?;
        let (m, d) = need_model(input, "occlusion")?;
        for t in &targets {
            let (y, folds) = (set.labels(t)?, folds_for(set, t)?);
            let r = occlude_and_probe(m, &d.clips, y, folds, t, occ, &s.probe)?;
            for b in &r.blocks {
                rows.push(row(b.block, "occ_acc_full", t, Some(b.acc_full)));
                rows.push(row(b.block, "occ_acc_occl", t, Some(b.acc_occl)));
                rows.push(row(b.block, "occdrop", t, b.occdrop));
            }
        }
    }
    Ok(rows)
}

fn series_name(r: &MetricRow, ambiguous: bool) -> String {
    if ambiguous {
        format!("{} {}", r.regime, r.model)
    } else {
        r.regime.clone()
    }
}

/// Chart file name and SVG text for every plotted metric.
pub fn charts(rows: &[MetricRow]) -> Vec<(String, String)> {
    let mut per_regime: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for r in rows {
        per_regime.entry(&r.regime).or_default().insert(&r.model);
    }
    let ambiguous = per_regime.values().any(|m| m.len() > 1);
    // Series keep first-appearance order.
    let mut order: Vec<String> = Vec::new();
    for r in rows {
        let n = series_name(r, ambiguous);
        if !order.contains(&n) {
            order.push(n);
        }
    }
    let mut out = Vec::new();
    let line_metrics = [
        ("probe_acc", "Linear probe accuracy"),
        ("map", "Retrieval mAP"),
        ("mse", "Masked reconstruction MSE"),
        ("cka", "CKA between consecutive blocks"),
        ("cps", "Cosine patch similarity"),
        ("occdrop", "Occlusion drop"),
    ];
    let mut keys: Vec<(&str, &str)> = Vec::new();
    for r in rows {
        if !keys.contains(&(&r.metric, &r.target)) {
            keys.push((&r.metric, &r.target));
        }
    }
    for (metric, title) in line_metrics {
        for &(m, target) in keys.iter().filter(|(m, _)| *m == metric) {
            let series: Vec<Series> = order
                .iter()
                .map(|name| Series {
                    name: name.clone(),
                    points: rows
                        .iter()
                        .filter(|r| r.metric == m && r.target == target)
                        .filter(|r| &series_name(r, ambiguous) == name)
                        .filter_map(|r| r.value.map(|v| (r.block as f64, v)))
                        .collect(),
                })
                .filter(|s| !s.points.is_empty())
                .collect();
            let (file, full_title) = if target.is_empty() {
                (format!("{m}.svg"), title.to_string())
            } else {
                (format!("{m}_{target}.svg"), format!("{title} ({target})"))
            };
            let x = if m == "cka" { "transition (from block)" } else { "block" };
            out.push((file, chart(&full_title, x, m, &series, Style::Line)));
        }
    }
    for &(_, target) in keys.iter().filter(|(m, _)| *m == "delta_map") {
        let series: Vec<Series> = order
            .iter()
            .map(|name| {
                let mine = |metric: &str, tgt: &str| -> Vec<(usize, f64)> {
                    rows.iter()
                        .filter(|r| r.metric == metric && r.target == tgt)
                        .filter(|r| &series_name(r, ambiguous) == name)
                        .filter_map(|r| r.value.map(|v| (r.block, v)))
                        .collect()
                };
                let ckas = mine("cka", "");
                let points = mine("delta_map", target)
                    .into_iter()
                    .filter_map(|(b, dm)| ckas.iter().find(|(cb, _)| *cb == b).map(|(_, c)| (*c, dm)))
                    .collect();
                Series {
                    name: name.clone(),
                    points,
                }
            })
            .filter(|s| !s.points.is_empty())
            .collect();
        out.push((
            format!("cka_vs_delta_map_{target}.svg"),
            chart(
                &format!("Inter-block CKA vs change in mAP ({target})"),
                "CKA(k, k+1)",
                "mAP(k+1) - mAP(k)",
                &series,
                Style::Scatter,
            ),
        ));
    }
    out
}

/// Everything one report run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub summary: Summary,
    pub csv_path: PathBuf,
    pub json_path: PathBuf,
    pub charts: Vec<PathBuf>,
}

pub fn write_csv(rows: &[MetricRow], path: &Path) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> CliResult<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Compute all rows and write `metrics.csv`, `summary.json` and `charts/`.
pub fn run_report(inputs: &[ReportInput], s: &ReportSettings, out_dir: &Path) -> CliResult<Report> {
    let mut rows = Vec::new();
    let mut solver = SolverStats::default();
    for input in inputs {
        rows.extend(input_rows(input, s, &mut solver)?);
    }
    std::fs::create_dir_all(out_dir.join("charts"))?;
    let csv_path = out_dir.join("metrics.csv");
    write_csv(&rows, &csv_path)?;
    let chart_files = charts(&rows);
    let summary = Summary::new(rows, solver);
    let json_path = out_dir.join("summary.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&summary)? + "\n")?;
    let mut paths = Vec::new();
    for (name, svg) in chart_files {
        let p = out_dir.join("charts").join(name);
        std::fs::write(&p, svg)?;
        paths.push(p);
    }
    Ok(Report {
        summary,
        csv_path,
        json_path,
        charts: paths,
    })
}
