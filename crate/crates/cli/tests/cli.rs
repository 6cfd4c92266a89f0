use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bwssl_cli::report::{read_csv, Summary};
use bwssl_core::embeddings::EmbeddingSet;
use bwssl_core::model::Checkpoint;
use serde_json::{json, Value};

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bwssl-lab"))
        .args(args)
        .env_remove("BWSSL_LAB_THREADS")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn spec(count: usize, frames: usize) -> Value {
    json!({
        "generator": "single",
        "grids": {
            "orientation": [0.0, 45.0, 90.0, 135.0],
            "spatial_frequency": [1.0, 2.0],
            "temporal_frequency": [1.0],
            "contrast": [1.0]
        },
        "count": count,
        "frames": frames,
        "height": 8,
        "width": 8,
        "seed": 7,
        "folds": 2
    })
}

fn experiment(k: usize, regimes: &[&str]) -> Value {
    json!({
        "seed": 3,
        "output_dir": "runs",
        "dataset": { "spec": "spec.json" },
        "model": {
            "preset": "custom",
            "encoder": { "n_layers": 4, "embed_dim": 16, "n_heads": 2, "mlp_ratio": 2, "k": k },
            "decoder": { "depth": 1, "width": 16, "n_heads": 2, "mlp_ratio": 2 },
            "tubelet": { "t": 2, "h": 4, "w": 4 },
            "clip": { "frames": 4, "height": 8, "width": 8, "channels": 1 }
        },
        "training": { "regimes": regimes, "epochs": 1, "batch_size": 4, "lr": 1e-3 },
        "diagnostics": { "metrics": ["probe", "map", "mse", "cka", "cps"], "targets": ["orientation"] }
    })
}

fn write_json(path: &Path, v: &Value) {
    std::fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

/// Temp dir holding `spec.json` (16 clips) and `config.json`.
fn fixture(k: usize, regimes: &[&str]) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    write_json(&dir.path().join("spec.json"), &spec(16, 4));
    let cfg = dir.path().join("config.json");
    write_json(&cfg, &experiment(k, regimes));
    (dir, cfg)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_reports_strata_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let spec_path = dir.path().join("spec.json");
    write_json(&spec_path, &spec(100, 2));
    let out = dir.path().join("data");
    let o = lab(&["synth", s(&spec_path), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest: Value = serde_json::from_slice(&o.stdout).unwrap();
    for n in manifest["counts"]["orientation"].as_object().unwrap().values() {
        assert_eq!(n, 25);
    }
    let again = lab(&["synth", s(&spec_path), "--out", s(&out)]);
    assert_eq!(code(&again), 2, "overwrite without --force");
    let again = lab(&["synth", s(&spec_path), "--out", s(&out), "--force"]);
    let m2: Value = serde_json::from_slice(&again.stdout).unwrap();
    assert_eq!(manifest["checksum"], m2["checksum"]);
}

#[test]
fn synth_without_spec_file_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = lab(&["synth", s(&dir.path().join("nope.json")), "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("not found"));
}

#[test]
fn unknown_config_key_is_named() {
    let (dir, cfg) = fixture(2, &["e2e"]);
    let mut v = experiment(2, &["e2e"]);
    v["training"]["learning_rate"] = json!(0.1);
    write_json(&cfg, &v);
    let o = lab(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));

    write_json(&cfg, &json!({ "seed": 1 }));
    assert_eq!(code(&lab(&["train", "--config", s(&cfg)])), 2);

    let mut v = experiment(2, &["e2e"]);
    v["dataset"]["spec"] = json!("missing.json");
    write_json(&cfg, &v);
    let o = lab(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("does not exist"));
    drop(dir);
}

#[test]
fn sequential_training_logs_both_stages_and_repeats_exactly() {
    let (dir, cfg) = fixture(2, &["sequential"]);
    let o = lab(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run = dir.path().join("runs/sequential");
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    let stages: std::collections::BTreeSet<&str> =
        log.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(stages.into_iter().collect::<Vec<_>>(), vec!["1", "2"]);
    let first = std::fs::read(run.join("final.ckpt")).unwrap();

    assert_eq!(code(&lab(&["train", "--config", s(&cfg)])), 2, "refuses to overwrite");
    let o = lab(&["train", "--config", s(&cfg), "--force", "--deterministic", "--threads", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read(run.join("final.ckpt")).unwrap(), first);
    assert_eq!(std::fs::read_to_string(run.join("train_log.csv")).unwrap(), log);
}

#[test]
fn divergence_exits_3_with_checkpoint() {
    let (_dir, cfg) = fixture(2, &["e2e"]);
    let mut v = experiment(2, &["e2e"]);
    v["training"]["lr"] = json!(1e30);
    v["training"]["warmup_frac"] = json!(0.0);
    v["training"]["epochs"] = json!(3);
    v["training"]["checkpoint_every"] = json!(1);
    write_json(&cfg, &v);
    let o = lab(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("diverged") && err.contains("last good checkpoint"), "{err}");
    let path = err.split("last good checkpoint ").nth(1).unwrap().trim();
    assert!(Path::new(path).exists(), "{path}");
}

fn train_and_extract(k: usize, keep_tokens: bool) -> (tempfile::TempDir, PathBuf, PathBuf) {
    let (dir, cfg) = fixture(k, &["simultaneous"]);
    let o = lab(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ckpt = dir.path().join("runs/simultaneous/final.ckpt");
    let emb = dir.path().join("emb.bin");
    let mut args = vec![
        "extract",
        "--checkpoint",
        s(&ckpt),
        "--dataset",
        dir.path().join("spec.json").to_str().unwrap(),
        "--out",
        s(&emb),
    ]
    .into_iter()
    .map(String::from)
    .collect::<Vec<_>>();
    if keep_tokens {
        args.push("--keep-tokens".into());
    }
    let o = lab(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    (dir, ckpt, emb)
}

#[test]
fn extract_records_k_and_guards_output() {
    let (dir, ckpt, emb) = train_and_extract(2, false);
    let set = EmbeddingSet::load(&emb).unwrap();
    assert_eq!(set.k(), Checkpoint::load(&ckpt).unwrap().meta.k);
    assert_eq!(set.meta.regime.as_deref(), Some("simultaneous"));
    let spec_path = dir.path().join("spec.json");
    let base = ["extract", "--checkpoint", s(&ckpt), "--dataset", s(&spec_path), "--out", s(&emb)];
    let o = lab(&base);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--force"));
    assert_eq!(code(&lab(&[&base[..], &["--force"]].concat())), 0);

    let other = dir.path().join("short.json");
    write_json(&other, &spec(8, 2));
    let o = lab(&["extract", "--checkpoint", s(&ckpt), "--dataset", s(&other), "--out", s(&dir.path().join("x.bin"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("mismatch"), "{}", stderr(&o));
}

#[test]
fn report_rows_totals_and_charts() {
    let (dir, _ckpt, emb) = train_and_extract(4, true);
    let out = dir.path().join("report");
    let o = lab(&["report", s(&emb), "--out", s(&out), "--targets", "orientation"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let rows = read_csv(&out.join("metrics.csv")).unwrap();
    let mut per_metric: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &rows {
        *per_metric.entry(&r.metric).or_default() += 1;
        assert_eq!(r.k, 4);
        assert_eq!(r.seed, 3);
    }
    for m in ["probe_acc", "map", "mse", "cps"] {
        assert_eq!(per_metric[m], 4, "{m}");
    }
    assert_eq!(per_metric["cka"], 3);
    assert_eq!(per_metric["delta_map"], 3);

    let summary: Summary =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.rows, rows);
    let mut agg: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    for r in &rows {
        let e = agg.entry(r.metric.clone()).or_default();
        e.0 += 1;
        e.1 += r.value.unwrap();
    }
    assert_eq!(agg.len(), summary.totals.len());
    for (m, (n, sum)) in agg {
        assert_eq!(summary.totals[&m].count, n);
        assert_eq!(summary.totals[&m].sum, sum);
    }

    let charts: Vec<_> = std::fs::read_dir(out.join("charts")).unwrap().map(|e| e.unwrap().path()).collect();
    assert!(charts.len() >= 6);
    for c in &charts {
        let text = std::fs::read_to_string(c).unwrap();
        let doc = roxmltree::Document::parse(&text).unwrap_or_else(|e| panic!("{}: {e}", c.display()));
        assert_eq!(doc.root_element().tag_name().name(), "svg");
    }
    let scatter = std::fs::read_to_string(out.join("charts/cka_vs_delta_map_orientation.svg")).unwrap();
    let doc = roxmltree::Document::parse(&scatter).unwrap();
    let points = doc.descendants().filter(|n| n.attribute("class") == Some("point")).count();
    assert_eq!(points, 3);
}

#[test]
fn cps_without_tokens_explains_the_flag() {
    let (dir, _ckpt, emb) = train_and_extract(2, false);
    let o = lab(&["report", s(&emb), "--out", s(&dir.path().join("r")), "--metrics", "cps"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--keep-tokens"), "{}", stderr(&o));
    let o = lab(&["report", s(&emb), "--out", s(&dir.path().join("r")), "--metrics", "bogus"]);
    assert_eq!(code(&o), 2);
}
