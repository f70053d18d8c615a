//! End-to-end drivers shared by the command line and the acceptance suite:
//! dataset preparation, full training pipelines and sensitivity sweeps.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataio::{load_images, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, RetrievalReport, SweepRow, SweepTable, SweepVariable};
use crate::heatmap::{render_stack, HeatmapConfig};
use crate::model::{Checkpoint, LandmarkNet};
use crate::synthgen::{build_dataset, config_digest};
use crate::trainer::{run_pipeline, CurvePoint, Mode, PipelineSpec, TrainData, TrainerMeta};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Reuses the dataset at `root` when its recorded generator digest matches `cfg`,
/// otherwise generates it.
pub fn ensure_synthetic(cfg: &RunConfig, root: &Path) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST_FILE);
    if path.is_file() {
        let m = DatasetManifest::read(&path)?;
        if m.provenance.config_digest.as_deref() == Some(config_digest(&cfg.synth).as_str()) {
            return Ok(m);
        }
    }
    build_dataset(&cfg.synth, root)
}

/// Reads a manifest given either its file or the dataset directory holding
/// `manifest.json`; returns it with the directory image paths are relative to.
pub fn open_manifest(path: &Path) -> Result<(DatasetManifest, PathBuf)> {
    let (file, root) = if path.is_dir() {
        (path.join(MANIFEST_FILE), path.to_path_buf())
    } else {
        (path.to_path_buf(), path.parent().map(Path::to_path_buf).unwrap_or_default())
    };
    Ok((DatasetManifest::read(&file)?, root))
}

/// Writes the heatmap stack of every sample at its native resolution under
/// `out/<split>/<identity>/<stem>-<landmark>.png`; returns the number of samples.
pub fn dump_heatmaps(manifest: &DatasetManifest, root: &Path, radius_frac: f64, out: &Path) -> Result<usize> {
    let mut n = 0;
    for s in &manifest.samples {
        let img = crate::raster::Raster::load(&root.join(&s.image_path), 1)?;
        let hm = HeatmapConfig::new(radius_frac, img.width.max(img.height));
        hm.validate()?;
        let stack = render_stack(&s.landmarks, &hm);
        let rel = Path::new(&s.image_path);
        let dir = out.join(rel.parent().unwrap_or(Path::new("")));
        let stem = rel.file_stem().and_then(|s| s.to_str()).unwrap_or("sample");
        stack.save_pngs(&dir, stem, &manifest.landmark_names)?;
        n += 1;
    }
    Ok(n)
}

/// Scores a checkpoint: gallery samples of `gallery` against query samples of `query`,
/// using the input size and heatmap geometry recorded at training time.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    gallery: (&DatasetManifest, &Path),
    query: (&DatasetManifest, &Path),
) -> Result<RetrievalReport> {
    let ck = Checkpoint::read(checkpoint)?;
    let meta = TrainerMeta::from_checkpoint(&ck);
    let (Some(size), Some(hm)) = (meta.input_size, meta.heatmap) else {
        return Err(Error::Checkpoint(format!(
            "{} lacks input size or heatmap metadata",
            checkpoint.display()
        )));
    };
    let mut net = ck.to_model()?;
    let g = load_images(gallery.1, &gallery.0.split_samples(Split::Gallery), size)?;
    let q = load_images(query.1, &query.0.split_samples(Split::Query), size)?;
    if g.is_empty() || q.is_empty() {
        return Err(Error::Eval(format!("{} gallery and {} query samples; need both", g.len(), q.len())));
    }
    evaluate(&mut net, &g, &q, &hm, &meta.config_digest)
}

/// Decodes train, gallery and query images at the network input size.
pub fn load_train_data(manifest: &DatasetManifest, root: &Path, input_size: usize) -> Result<TrainData> {
    let load = |split| load_images(root, &manifest.split_samples(split), input_size);
    let train = load(Split::Train)?;
    if train.is_empty() {
        return Err(Error::Split("dataset has no training samples".into()));
    }
    Ok(TrainData {
        train,
        gallery: load(Split::Gallery)?,
        query: load(Split::Query)?,
    })
}

pub fn pipeline_spec(cfg: &RunConfig) -> PipelineSpec<'_> {
    PipelineSpec {
        train: &cfg.trainer,
        model: &cfg.model,
        losses: &cfg.losses,
        heatmap: cfg.heatmap(),
        config_digest: cfg.digest(),
        dump_heatmaps: None,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub seed: u64,
    pub baseline: f64,
    pub stage1: f64,
    pub stage2: f64,
    pub curves: Vec<(String, Vec<CurvePoint>)>,
}

/// Evaluation after the last stage of `mode`, plus its curve and trained network.
pub struct ModeRun {
    pub report: RetrievalReport,
    pub curve: Vec<CurvePoint>,
    pub net: LandmarkNet<f32>,
    pub checkpoint: PathBuf,
}

pub fn run_mode(cfg: &RunConfig, data: &TrainData, mode: Mode, out_dir: &Path) -> Result<ModeRun> {
    let out = run_pipeline(&pipeline_spec(cfg), data, mode, None, out_dir)?;
    let report = out
        .report
        .ok_or_else(|| Error::Eval("no gallery/query samples to evaluate".into()))?;
    Ok(ModeRun {
        report,
        curve: out.curve,
        net: out.net,
        checkpoint: out.final_checkpoint,
    })
}

/// Baseline, landmark stage 1 and landmark stage 2 (continuing stage 1) for one seed.
pub fn compare_modes(cfg: &RunConfig, data: &TrainData, out_dir: &Path) -> Result<ComparisonResult> {
    let base = run_mode(cfg, data, Mode::Baseline, &out_dir.join("baseline"))?;
    let lm = out_dir.join("landmark");
    let s1 = run_mode(cfg, data, Mode::LandmarkStage1, &lm)?;
    let s2 = run_mode(cfg, data, Mode::LandmarkStage2, &lm)?;
    Ok(ComparisonResult {
        seed: cfg.trainer.seed,
        baseline: base.report.top1,
        stage1: s1.report.top1,
        stage2: s2.report.top1,
        curves: vec![("baseline".into(), base.curve), ("landmark".into(), [s1.curve, s2.curve].concat())],
    })
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One row per setting: the full landmark pipeline per seed, reporting per-metric medians.
pub fn sensitivity_sweep(variable: SweepVariable, base: &RunConfig, out_dir: &Path) -> Result<SweepTable> {
    let labels = SweepTable::labels(variable);
    let settings: Vec<RunConfig> = match variable {
        SweepVariable::Radius => base
            .eval
            .sweep_radii
            .iter()
            .map(|&r| {
                let mut c = base.clone();
                c.heatmap.radius_frac = r;
                c
            })
            .collect(),
        SweepVariable::Mla => [true, false]
            .into_iter()
            .map(|on| {
                let mut c = base.clone();
                c.synth.hide_one_landmark_prob = base.eval.mla_hide_prob;
                c.trainer.augment.mla = on;
                c
            })
            .collect(),
    };
    let labels: Vec<String> = match variable {
        SweepVariable::Radius => base
            .eval
            .sweep_radii
            .iter()
            .map(|r| format!("hm {}%", (r * 100.0).round()))
            .collect(),
        SweepVariable::Mla => labels.iter().map(|s| s.to_string()).collect(),
    };
    let mut rows = Vec::new();
    for (label, cfg) in labels.iter().zip(&settings) {
        cfg.validate()?;
        let data_root = cfg.data_root.join(format!("synth-{}", &config_digest(&cfg.synth)[..12]));
        let manifest = ensure_synthetic(cfg, &data_root)?;
        let data = load_train_data(&manifest, &data_root, cfg.trainer.input_size)?;
        let mut runs: Vec<RetrievalReport> = Vec::new();
        for &seed in &cfg.eval.sweep_seeds {
            let mut c = cfg.clone();
            c.trainer.seed = seed;
            let dir = out_dir.join(slug(label)).join(format!("seed-{seed}")).join("landmark");
            run_mode(&c, &data, Mode::LandmarkStage1, &dir)?;
            runs.push(run_mode(&c, &data, Mode::LandmarkStage2, &dir)?.report);
        }
        let med = |f: fn(&RetrievalReport) -> f64| median(&runs.iter().map(f).collect::<Vec<_>>());
        rows.push(SweepRow {
            label: label.clone(),
            top1: med(|r| r.top1),
            top5: med(|r| r.top5),
            top10: med(|r| r.top10),
            config_digest: cfg.digest(),
        });
    }
    Ok(SweepTable { variable, rows })
}

fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect::<String>()
        .split('-')
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join("-")
}
