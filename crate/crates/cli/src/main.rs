//! `hagmil`: generate synthetic pyramids, train per-level models, evaluate,
//! sweep the selection budget, export heatmaps and inspect binary files.

mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hagmil::data::Split;
use hagmil::heatmap::HeatmapFormat;
use hagmil::metrics::ThresholdMode;
use hagmil::HagError;
use serde_json::json;

#[derive(Debug, Parser)]
#[command(name = "hagmil", version, about = "Hierarchical attention-guided MIL over feature pyramids")]
pub struct Cli {
    /// Seed for generation, splitting, initialization and shuffling.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads for slide-parallel evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset of feature pyramids.
    Synth(SynthArgs),
    /// Train one model per resolution level.
    Train(TrainArgs),
    /// Evaluate a trained run and write a JSON report.
    Eval(EvalArgs),
    /// Evaluate a run at several selection budgets, one JSON line each.
    SweepK(SweepArgs),
    /// Export the attention heatmap of one slide at one level.
    Heatmap(HeatmapArgs),
    /// Print the header of a feature file or checkpoint.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON generator settings; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configured slide count.
    #[arg(long)]
    num_slides: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// JSON with optional `model` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_run: PathBuf,
    /// Overrides the configured epoch cap.
    #[arg(long)]
    max_epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Selection budget used at every level instead of the trained one.
    #[arg(long)]
    k_override: Option<usize>,
    /// Report path; printed to stdout when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value = "youden")]
    threshold: ThresholdMode,
    /// Dataset root; defaults to the one the run was trained on.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    run: PathBuf,
    /// Comma-separated budgets; defaults to 7, 1007, ... clamped to the parent count.
    #[arg(long, value_delimiter = ',')]
    ks: Vec<usize>,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, default_value = "youden")]
    threshold: ThresholdMode,
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    slide: String,
    #[arg(long, default_value_t = 0)]
    level: usize,
    #[arg(long, default_value = "pgm")]
    format: HeatmapFormat,
    /// Output path; defaults to `<slide>_level<L>.<format>` in the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    k_override: Option<usize>,
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    file: PathBuf,
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    err.chain()
        .find_map(|e| e.downcast_ref::<HagError>().map(HagError::kind))
        .or_else(|| err.chain().find_map(|e| e.downcast_ref::<std::io::Error>().map(|_| "io")))
        .unwrap_or("cli")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if !e.use_stderr() {
                e.exit();
            }
            let _ = e.print();
            eprintln!("{}", json!({ "error": "usage", "message": e.kind().to_string() }));
            return ExitCode::from(2);
        }
    };
    let result = match &cli.command {
        Command::Synth(a) => run::synth(&cli, a),
        Command::Train(a) => run::train(&cli, a),
        Command::Eval(a) => run::eval(&cli, a),
        Command::SweepK(a) => run::sweep_k(&cli, a),
        Command::Heatmap(a) => run::heatmap(&cli, a),
        Command::Inspect(a) => run::inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": error_kind(&e), "message": format!("{e:#}") }));
            ExitCode::FAILURE
        }
    }
}
