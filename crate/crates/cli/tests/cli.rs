use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use landmark_reid::config::RunConfig;

const TINY: &str = r#"
seed = 0
[synth]
n_identities = 6
image_size = 64
[model]
backbone = "small-residual"
embed_dim = 16
small_widths = [4, 8, 8, 16]
decoder_seed_channels = 8
decoder_channels = [8, 4, 4]
[trainer]
input_size = 32
p = 3
k = 2
warmup_epochs = 1
lr_milestones = []
eval_every = 1
[trainer.epochs]
s1a = 1
s1b = 1
s2a = 1
s2b = 1
[eval]
sweep_seeds = [0]
"#;

fn lmreid(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lmreid"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(out.status.success(), "exit {:?}: {stderr}", out.status.code());
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let text = format!("output_root = \"{0}/runs\"\ndata_root = \"{0}/data\"\n{TINY}", dir.display());
    let p = dir.join("tiny.toml");
    fs::write(&p, text).unwrap();
    p
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn unknown_config_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[trainer]\nbase_lr = 1e-3\nlearning_rat = 2\n").unwrap();
    let out = lmreid(dir.path(), &["train", "--config", cfg.to_str().unwrap(), "--mode", "baseline"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("learning_rat"), "{stderr}");
    assert!(stderr.contains("trainer"), "{stderr}");
}

#[test]
fn invalid_values_exit_2_with_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[heatmap]\nradius_frac = -0.1\n").unwrap();
    let out = lmreid(dir.path(), &["gen-data", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("heatmap.radius_frac"));

    let out = lmreid(dir.path(), &["train", "--mode", "landmark", "--config", tiny_config(dir.path()).to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--mode"));

    let out = lmreid(dir.path(), &["sweep", "--variable", "sigma"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = lmreid(
        dir.path(),
        &["eval", "--checkpoint", "missing.ckpt", "--gallery", "nowhere", "--query", "nowhere"],
    );
    assert_eq!(out.status.code(), Some(1));
    let cfg = tiny_config(dir.path());
    let out = lmreid(
        dir.path(),
        &["train", "--config", cfg.to_str().unwrap(), "--mode", "landmark-stage2", "--out", "empty"],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn committed_configs_are_valid() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(&root).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "toml") {
            RunConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            n += 1;
        }
    }
    assert!(n >= 2);
}

#[test]
fn smoke_path_from_data_to_report_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d);
    let cfg = cfg.to_str().unwrap();

    ok(lmreid(d, &["gen-data", "--config", cfg, "--out", "data", "--seed", "3", "--dump-heatmaps"]));
    assert!(d.join("data/manifest.json").is_file());
    assert!(d.join("data/heatmaps").is_dir());
    let prov = json(&d.join("data/run.json"));
    assert_eq!(prov["seed"], 3);
    assert!(prov["config_digest"].as_str().is_some_and(|s| !s.is_empty()));
    assert!(prov["version"].is_string());

    ok(lmreid(d, &["train", "--config", cfg, "--data", "data", "--mode", "baseline", "--out", "base"]));
    let ckpt = d.join("base/stage-1b-final.ckpt");
    assert!(ckpt.is_file());
    assert!(d.join("base/run.json").is_file());
    let metrics = fs::read_to_string(d.join("base/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "step,loss_total,loss_id,loss_triplet,loss_center,loss_hr");

    ok(lmreid(d, &["train", "--config", cfg, "--data", "data", "--mode", "landmark-stage1", "--out", "lm"]));
    ok(lmreid(
        d,
        &["train", "--config", cfg, "--data", "data", "--mode", "landmark-stage2", "--out", "lm", "--dump-heatmaps"],
    ));
    assert!(d.join("lm/stage-2b-final.ckpt").is_file());
    assert!(d.join("lm/heatmaps").is_dir());

    ok(lmreid(
        d,
        &["eval", "--checkpoint", "base/stage-1b-final.ckpt", "--gallery", "data", "--query", "data/manifest.json", "--out", "report.json"],
    ));
    let report = json(&d.join("report.json"));
    let top1 = report["top1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&top1));
    assert_eq!(report["n_queries"], 30);
    assert!(d.join("report.run.json").is_file());

    let trained = json(&d.join("base/report-baseline.json"));
    assert_eq!(trained["top1"], report["top1"]);

    ok(lmreid(d, &["plot", "baseline=base", "lm", "--out", "plots/curve.svg"]));
    let svg = fs::read_to_string(d.join("plots/curve.svg")).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
    assert!(svg.contains("baseline") && svg.contains("lm"));
    assert!(d.join("plots/curve.run.json").is_file());
}

#[test]
fn radius_sweep_writes_a_three_row_table() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d);
    ok(lmreid(d, &["sweep", "--config", cfg.to_str().unwrap(), "--variable", "radius", "--out", "sweep"]));
    let table = json(&d.join("sweep/table.json"));
    let rows = table["rows"].as_array().unwrap();
    let labels: Vec<&str> = rows.iter().map(|r| r["label"].as_str().unwrap()).collect();
    assert_eq!(labels, ["hm 5%", "hm 10%", "hm 20%"]);
    let md = fs::read_to_string(d.join("sweep/table.md")).unwrap();
    assert_eq!(md.lines().filter(|l| l.starts_with("| hm ")).count(), 3);
    assert!(d.join("sweep/run.json").is_file());
}
