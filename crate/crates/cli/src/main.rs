use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use landmark_reid::config::RunConfig;
use landmark_reid::dataio::{build_real_splits, load_annotations, Split};
use landmark_reid::evalkit::SweepVariable;
use landmark_reid::experiment::{
    dump_heatmaps, ensure_synthetic, evaluate_checkpoint, load_train_data, open_manifest, pipeline_spec,
    sensitivity_sweep,
};
use landmark_reid::plot::{line_chart_svg, read_series};
use landmark_reid::seed::{self, tag};
use landmark_reid::synthgen::build_dataset;
use landmark_reid::trainer::{run_pipeline, Mode, CURVE_FILE};

const PROVENANCE_FILE: &str = "run.json";

#[derive(Parser)]
#[command(name = "lmreid", version, about = "Landmark-guided re-identification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    GenData(GenDataArgs),
    /// Build gallery/query splits for an annotated dataset with a test split.
    Split(SplitArgs),
    /// Run the training stages of one mode.
    Train(TrainArgs),
    /// Score a checkpoint on gallery and query manifests.
    Eval(EvalArgs),
    /// Heatmap-radius or missing-landmark sensitivity table.
    Sweep(SweepArgs),
    /// Accuracy-versus-epoch chart from evaluation curves.
    Plot(PlotArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; defaults to `data_root` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `synth.master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Also write per-landmark heatmap PNGs under `<out>/heatmaps`.
    #[arg(long)]
    dump_heatmaps: bool,
}

#[derive(Args)]
struct SplitArgs {
    /// Dataset directory holding `landmarks.csv` with train and test images.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 2)]
    per_id_gallery: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Manifest to write; defaults to `<data>/split-seed-<seed>.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// baseline, landmark-stage1 or landmark-stage2.
    #[arg(long)]
    mode: String,
    /// Checkpoint to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Manifest file or dataset directory; defaults to synthetic data at `data_root`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory; defaults to `<output_root>/<baseline|landmark>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `trainer.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the input heatmaps of the first batch of each stage under `<out>/heatmaps`.
    #[arg(long)]
    dump_heatmaps: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest (or dataset directory) providing gallery samples.
    #[arg(long)]
    gallery: PathBuf,
    /// Manifest (or dataset directory) providing query samples.
    #[arg(long)]
    query: PathBuf,
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
    /// Directory image paths are relative to; defaults to each manifest's directory.
    #[arg(long)]
    data_root: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// radius or mla.
    #[arg(long)]
    variable: String,
    /// Output directory; defaults to `<output_root>/sweep-<variable>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `eval.sweep_seeds`.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Args)]
struct PlotArgs {
    /// Curve CSVs as `label=path` or `path` (label from the parent directory).
    /// A run directory stands for its evaluation curve.
    #[arg(required = true)]
    inputs: Vec<String>,
    #[arg(long, default_value = "curve.svg")]
    out: PathBuf,
    /// Column to plot: top1, top5 or top10.
    #[arg(long, default_value = "top1")]
    metric: String,
    #[arg(long, default_value = "Top-1 accuracy during training")]
    title: String,
}

#[derive(Serialize)]
struct Provenance<'a> {
    command: &'a str,
    args: Vec<String>,
    version: &'static str,
    seed: Option<u64>,
    config_digest: Option<String>,
    config: Option<&'a RunConfig>,
    outputs: Vec<String>,
}

impl<'a> Provenance<'a> {
    fn new(command: &'a str, cfg: Option<&'a RunConfig>, seed: Option<u64>) -> Self {
        Self {
            command,
            args: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION"),
            seed,
            config_digest: cfg.map(RunConfig::digest),
            config: cfg,
            outputs: Vec::new(),
        }
    }

    fn output(mut self, p: &Path) -> Self {
        self.outputs.push(p.display().to_string());
        self
    }

    /// `run.json` inside a directory output, `<stem>.run.json` beside a file output.
    fn write_for(&self, output: &Path) -> Result<PathBuf> {
        let path = if output.is_dir() {
            output.join(PROVENANCE_FILE)
        } else {
            let stem = output.file_stem().and_then(|s| s.to_str()).unwrap_or("output");
            output.with_file_name(format!("{stem}.{PROVENANCE_FILE}"))
        };
        write_json(&path, self)?;
        Ok(path)
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(cfg)
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.synth.master_seed = s;
    }
    cfg.validate()?;
    let out = a.out.clone().unwrap_or_else(|| cfg.data_root.clone());
    let manifest = build_dataset(&cfg.synth, &out)?;
    let mut prov = Provenance::new("gen-data", Some(&cfg), Some(cfg.synth.master_seed)).output(&out);
    if a.dump_heatmaps {
        let dir = out.join("heatmaps");
        let n = dump_heatmaps(&manifest, &out, cfg.heatmap.radius_frac, &dir)?;
        println!("heatmaps for {n} samples in {}", dir.display());
        prov = prov.output(&dir);
    }
    prov.write_for(&out)?;
    println!("{} samples written to {}", manifest.samples.len(), out.display());
    Ok(())
}

fn split(a: &SplitArgs) -> Result<()> {
    let manifest = load_annotations(&a.data)?;
    let mut rng = seed::stream(a.seed, &[tag::SPLIT]);
    let out_manifest = build_real_splits(&manifest, a.per_id_gallery, &mut rng)?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| a.data.join(format!("split-seed-{}.json", a.seed)));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(&out, out_manifest.to_json()?).with_context(|| format!("writing {}", out.display()))?;
    Provenance::new("split", None, Some(a.seed)).output(&out).write_for(&out)?;
    let count = |s| out_manifest.split(s).count();
    println!(
        "train {} gallery {} query {} -> {}",
        count(Split::Train),
        count(Split::Gallery),
        count(Split::Query),
        out.display()
    );
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    let Some(mode) = Mode::parse(&a.mode) else {
        bail!(landmark_reid::Error::Config {
            field: "--mode".into(),
            reason: format!("unknown mode `{}`; expected baseline, landmark-stage1 or landmark-stage2", a.mode),
        });
    };
    if let Some(s) = a.seed {
        cfg.trainer.seed = s;
        cfg.seed = s;
    }
    cfg.validate()?;
    let (manifest, root) = match &a.data {
        Some(p) => open_manifest(p)?,
        None => (ensure_synthetic(&cfg, &cfg.data_root)?, cfg.data_root.clone()),
    };
    let data = load_train_data(&manifest, &root, cfg.trainer.input_size)?;
    let sub = if mode == Mode::Baseline { "baseline" } else { "landmark" };
    let out = a.out.clone().unwrap_or_else(|| cfg.output_root.join(sub));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut spec = pipeline_spec(&cfg);
    if a.dump_heatmaps {
        spec.dump_heatmaps = Some(out.join("heatmaps"));
    }
    let result = run_pipeline(&spec, &data, mode, a.resume.as_deref(), &out)?;
    if let Some(report) = &result.report {
        write_json(&out.join(format!("report-{}.json", mode.as_str())), report)?;
        println!(
            "{}: top-1 {:.4} top-5 {:.4} top-10 {:.4}",
            mode.as_str(),
            report.top1,
            report.top5,
            report.top10
        );
    }
    Provenance::new("train", Some(&cfg), Some(cfg.trainer.seed))
        .output(&result.final_checkpoint)
        .write_for(&out)?;
    println!("final checkpoint {}", result.final_checkpoint.display());
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let (g, g_root) = open_manifest(&a.gallery)?;
    let (q, q_root) = open_manifest(&a.query)?;
    let g_root = a.data_root.clone().unwrap_or(g_root);
    let q_root = a.data_root.clone().unwrap_or(q_root);
    let report = evaluate_checkpoint(&a.checkpoint, (&g, &g_root), (&q, &q_root))?;
    write_json(&a.out, &report)?;
    Provenance::new("eval", None, None).output(&a.out).write_for(&a.out)?;
    println!(
        "top-1 {:.4} top-5 {:.4} top-10 {:.4} over {} queries -> {}",
        report.top1,
        report.top5,
        report.top10,
        report.n_queries,
        a.out.display()
    );
    Ok(())
}

fn sweep(a: &SweepArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    let Some(variable) = SweepVariable::parse(&a.variable) else {
        bail!(landmark_reid::Error::Config {
            field: "--variable".into(),
            reason: format!("unknown sweep variable `{}`; expected radius or mla", a.variable),
        });
    };
    if let Some(seeds) = &a.seeds {
        cfg.eval.sweep_seeds = seeds.clone();
    }
    cfg.validate()?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| cfg.output_root.join(format!("sweep-{}", a.variable)));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let table = sensitivity_sweep(variable, &cfg, &out)?;
    let md = out.join("table.md");
    fs::write(&md, table.to_markdown()).with_context(|| format!("writing {}", md.display()))?;
    write_json(&out.join("table.json"), &table)?;
    Provenance::new("sweep", Some(&cfg), cfg.eval.sweep_seeds.first().copied())
        .output(&md)
        .write_for(&out)?;
    print!("{}", table.to_markdown());
    Ok(())
}

fn plot(a: &PlotArgs) -> Result<()> {
    let mut series = Vec::new();
    for input in &a.inputs {
        let (label, path) = match input.split_once('=') {
            Some((l, p)) => (l.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(input);
                let dir = if p.is_dir() { p.clone() } else { p.parent().map(Path::to_path_buf).unwrap_or_default() };
                let label = dir.file_name().and_then(|s| s.to_str()).unwrap_or(input).to_string();
                (label, p)
            }
        };
        let path = if path.is_dir() { path.join(CURVE_FILE) } else { path };
        series.push(read_series(&path, "epoch", &a.metric, &label)?);
    }
    let svg = line_chart_svg(&series, &a.title, "epoch", &a.metric, true);
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(&a.out, svg).with_context(|| format!("writing {}", a.out.display()))?;
    Provenance::new("plot", None, None).output(&a.out).write_for(&a.out)?;
    println!("{} series -> {}", series.len(), a.out.display());
    Ok(())
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        matches!(
            c.downcast_ref::<landmark_reid::Error>(),
            Some(landmark_reid::Error::Config { .. })
        )
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Plot(a) => plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_config_error(&e) { 2 } else { 1 })
        }
    }
}
