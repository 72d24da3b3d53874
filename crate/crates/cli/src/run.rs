//! Subcommand bodies.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hagmil::checkpoint::{self, CHECKPOINT_MAGIC};
use hagmil::data::manifest::DEFAULT_RATIOS;
use hagmil::data::{load_dataset, read_header, synth_generate, write_dataset, DatasetManifest, FeaturePyramid, Split, SynthConfig};
use hagmil::heatmap::export_heatmap;
use hagmil::metrics::{classify_metrics, config_digest, EvalReport, ThresholdMode};
use hagmil::pipeline::{
    evaluate, k_sweep_grid, planted_coverage, planted_recall, train as train_model, write_log_line, HagConfig, HagModel, SlideResult,
    TrainConfig,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::{Cli, EvalArgs, HeatmapArgs, InspectArgs, SweepArgs, SynthArgs, TrainArgs};

pub const TRAIN_CONFIG_FILE: &str = "train_config.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const RUN_INFO_FILE: &str = "run.json";

/// Budgets tried by `sweep-k` when none are given.
const DEFAULT_SWEEP_COUNT: usize = 4;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    model: Option<HagConfig>,
    train: Option<TrainConfig>,
}

/// Where a run came from, so later commands can find its dataset.
#[derive(Debug, Serialize, Deserialize)]
struct RunInfo {
    data: PathBuf,
    seed: u64,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn synth(cli: &Cli, args: &SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    cfg.seed = cli.seed;
    if let Some(n) = args.num_slides {
        cfg.num_slides = n;
    }
    let slides = synth_generate(&cfg)?;
    let manifest = write_dataset(&args.out, &slides, cfg.class_count, DEFAULT_RATIOS, cli.seed)?;
    let (train, val, test) = manifest.splits.sizes();
    println!(
        "{}",
        json!({
            "out": args.out,
            "slides": manifest.slides.len(),
            "levels": manifest.num_levels,
            "feature_dim": manifest.feature_dim,
            "splits": { "train": train, "val": val, "test": test },
        })
    );
    Ok(())
}

pub fn train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let (manifest, data) = load_dataset(&args.data)?;
    let file: TrainFile = match &args.config {
        Some(p) => read_json(p)?,
        None => TrainFile::default(),
    };
    let mut cfg = file.model.unwrap_or_else(|| HagConfig::desk(manifest.feature_dim));
    cfg.num_levels = manifest.num_levels;
    cfg.model.num_classes = manifest.num_classes;
    let mut tc = file.train.unwrap_or_else(|| TrainConfig::desk(cli.seed));
    tc.seed = cli.seed;
    tc.threads = cli.threads;
    if let Some(e) = args.max_epochs {
        tc.max_epochs = e;
    }

    fs::create_dir_all(&args.out_run).with_context(|| format!("creating {}", args.out_run.display()))?;
    let mut model = HagModel::new(cfg, cli.seed)?;
    let log_path = args.out_run.join(TRAIN_LOG_FILE);
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let report = train_model(&mut model, &data, &tc, |entry| {
        write_log_line(&mut log, entry)?;
        log.flush().map_err(|e| hagmil::HagError::io(&log_path, e))
    })?;
    drop(log);

    model.save(&args.out_run)?;
    write_json(&args.out_run.join(TRAIN_CONFIG_FILE), &tc)?;
    write_json(&args.out_run.join(TRAIN_REPORT_FILE), &report)?;
    let data_root = fs::canonicalize(&args.data).unwrap_or_else(|_| args.data.clone());
    write_json(
        &args.out_run.join(RUN_INFO_FILE),
        &RunInfo {
            data: data_root,
            seed: cli.seed,
        },
    )?;
    println!(
        "{}",
        json!({
            "run": args.out_run,
            "epochs_run": report.epochs_run,
            "best_epoch": report.best_epoch,
            "best_val_loss": report.best_val_loss,
        })
    );
    Ok(())
}

/// A trained model plus the dataset it should be evaluated on.
struct LoadedRun {
    model: HagModel,
    data_root: PathBuf,
    manifest: DatasetManifest,
    train: TrainConfig,
}

fn load_run(run: &Path, data: Option<&Path>) -> Result<LoadedRun> {
    let model = HagModel::load(run)?;
    let data_root = match data {
        Some(d) => d.to_path_buf(),
        None => read_json::<RunInfo>(&run.join(RUN_INFO_FILE))?.data,
    };
    let manifest = DatasetManifest::load(&data_root)?;
    let train = read_json(&run.join(TRAIN_CONFIG_FILE))?;
    Ok(LoadedRun {
        model,
        data_root,
        manifest,
        train,
    })
}

fn score(results: &[SlideResult], mode: ThresholdMode) -> Result<EvalReport> {
    let probs: Vec<Vec<f64>> = results.iter().map(|r| r.inference.probs.clone()).collect();
    let labels: Vec<usize> = results.iter().map(|r| r.label).collect();
    Ok(classify_metrics(&probs, &labels, mode)?)
}

fn digest(run: &LoadedRun, split: Split, k_override: Option<usize>, mode: ThresholdMode) -> Result<String> {
    Ok(config_digest(&json!({
        "model": run.model.config,
        "train": run.train,
        "split": split,
        "k_override": k_override,
        "threshold": mode,
    }))?)
}

/// Pooled `(hits, denominator)` ratio over positive slides.
fn pooled(
    slides: &[FeaturePyramid],
    results: &[SlideResult],
    f: fn(&FeaturePyramid, &hagmil::pipeline::Inference) -> (usize, usize),
) -> Option<f64> {
    let (hits, total) = slides
        .iter()
        .zip(results)
        .filter(|(s, _)| s.label != 0)
        .map(|(s, r)| f(s, &r.inference))
        .fold((0, 0), |(h, t), (a, b)| (h + a, t + b));
    (total > 0).then(|| hits as f64 / total as f64)
}

pub fn eval(cli: &Cli, args: &EvalArgs) -> Result<()> {
    let run = load_run(&args.run, args.data.as_deref())?;
    let slides = run.manifest.load_split(&run.data_root, args.split)?;
    if slides.is_empty() {
        bail!("split {} is empty", args.split);
    }
    let results = evaluate(&run.model, &slides, args.k_override, cli.threads)?;
    let report = score(&results, args.threshold)?.with_digest(digest(&run, args.split, args.k_override, args.threshold)?);
    let text = serde_json::to_string_pretty(&report)?;
    match &args.report {
        Some(p) => fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

pub fn sweep_k(cli: &Cli, args: &SweepArgs) -> Result<()> {
    let run = load_run(&args.run, args.data.as_deref())?;
    let slides = run.manifest.load_split(&run.data_root, args.split)?;
    if slides.is_empty() {
        bail!("split {} is empty", args.split);
    }
    let ks = if args.ks.is_empty() {
        let max = slides.iter().map(|s| s.index.count(1.min(s.num_levels() - 1))).max().unwrap_or(1);
        k_sweep_grid(DEFAULT_SWEEP_COUNT, max)
    } else {
        args.ks.clone()
    };
    if ks.contains(&0) {
        bail!("selection budgets must be >= 1");
    }
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for k in ks {
        let results = evaluate(&run.model, &slides, Some(k), cli.threads)?;
        let report = score(&results, args.threshold)?.with_digest(digest(&run, args.split, Some(k), args.threshold)?);
        let line = json!({
            "k": k,
            "auc": report.auc,
            "f1": report.f1,
            "accuracy": report.accuracy,
            "threshold": report.threshold,
            "planted_recall": pooled(&slides, &results, planted_recall),
            "planted_coverage": pooled(&slides, &results, planted_coverage),
            "config_digest": report.config_digest,
        });
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn heatmap(_cli: &Cli, args: &HeatmapArgs) -> Result<()> {
    let run = load_run(&args.run, args.data.as_deref())?;
    let slide = run.manifest.load_slide(&run.data_root, &args.slide)?;
    let inference = run.model.infer(&slide, args.k_override)?;
    let Some(level) = inference.level(args.level) else {
        bail!("level {} not in 0..{}", args.level, slide.num_levels());
    };
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.run.join(format!("{}_level{}.{}", args.slide, args.level, args.format)));
    let grid = export_heatmap(level, &slide.index, args.format, &out)?;
    println!(
        "{}",
        json!({ "out": out, "rows": grid.rows, "cols": grid.cols, "level": args.level })
    );
    Ok(())
}

pub fn inspect(args: &InspectArgs) -> Result<()> {
    let bytes = fs::read(&args.file).map_err(|e| hagmil::HagError::io(&args.file, e))?;
    let value = if bytes.starts_with(&CHECKPOINT_MAGIC) {
        let tensors = checkpoint::describe(&bytes)?;
        json!({
            "format": "HAGC",
            "tensors": tensors.iter().map(|t| json!({ "name": t.name, "shape": t.shape })).collect::<Vec<_>>(),
        })
    } else {
        let h = read_header(&args.file)?;
        json!({ "format": "HAGF", "version": h.version, "level": h.level, "n": h.n, "d": h.d })
    };
    println!("{value}");
    Ok(())
}
