//! `lanevid`: generate synthetic lane videos, train the detector, evaluate,
//! run inference, compute dataset statistics, and render visualizations.

mod commands;
mod config;
mod manifest;

use clap::{Parser, Subcommand};
use config::RunConfig;
use lanevid::network::Variant;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "lanevid",
    version,
    about = "Video instance lane detection pipeline"
)]
struct Cli {
    /// Run configuration file (TOML). All sections optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed override; defaults to [run].seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic clips into the canonical dataset layout.
    Generate {
        /// Output dataset root (default: [run].out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run two-stage training on the train split.
    Train {
        /// Network variant.
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
        /// Memory frames per branch.
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(["3", "5", "7"]))]
        memory_frames: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict a split and score it against ground truth.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// `train`, `test`, or a split file name.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Feed ground truth as predictions (scores must be perfect).
        #[arg(long)]
        oracle: bool,
        /// Baseline report.jsonl to diff against.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Predict one clip and write mask PNGs.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        video: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Resize frames not divisible by 16 instead of failing.
        #[arg(long)]
        resize: bool,
    },
    /// Histogram lanes per frame, line-types, and scenarios.
    Stats {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Also write the statistics as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Color-coded prediction overlays plus per-frame score plots.
    Visualize {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        video: String,
        /// Directory with predicted masks (from eval or infer).
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::parse(s).map_err(|e| e.to_string())
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    // Distinct codes per error family; 1 for everything else.
    if let Some(e) = err.downcast_ref::<lanevid::Error>() {
        return match e.category() {
            "config" => 2,
            "io" => 3,
            "validation" => 4,
            "parse" => 5,
            "divergence" => 6,
            _ => 1,
        };
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return 3;
    }
    1
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let seed = cli.seed.unwrap_or_else(|| cfg.run.seed());
    let out_dir = |explicit: &Option<PathBuf>| -> PathBuf {
        explicit.clone().unwrap_or_else(|| cfg.run.out_dir())
    };

    match &cli.command {
        Command::Generate { out } => commands::cmd_generate(&cfg, &out_dir(out), seed),
        Command::Train {
            variant,
            memory_frames,
            out,
        } => {
            let mem = memory_frames
                .as_deref()
                .map(|s| s.parse::<usize>().expect("validated by clap"));
            commands::cmd_train(
                &cfg,
                cli.config.as_deref(),
                *variant,
                mem,
                seed,
                &out_dir(out),
            )
        }
        Command::Eval {
            checkpoint,
            dataset,
            split,
            out,
            oracle,
            baseline,
        } => commands::cmd_eval(
            &cfg,
            checkpoint.as_deref(),
            dataset.as_deref(),
            split,
            &out_dir(out),
            *oracle,
            baseline.as_deref(),
            seed,
        ),
        Command::Infer {
            checkpoint,
            dataset,
            video,
            out,
            resize,
        } => commands::cmd_infer(
            &cfg,
            checkpoint,
            dataset.as_deref(),
            video,
            &out_dir(out),
            *resize,
            seed,
        ),
        Command::Stats { dataset, json } => {
            commands::cmd_stats(&cfg, dataset.as_deref(), json.as_deref())
        }
        Command::Visualize {
            dataset,
            video,
            predictions,
            out,
        } => commands::cmd_visualize(
            &cfg,
            dataset.as_deref(),
            video,
            predictions,
            &out_dir(out),
            seed,
        ),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
