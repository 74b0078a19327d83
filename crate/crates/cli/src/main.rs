use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;

use commands::Failure;

/// Synthetic urine-sediment detection experiments.
#[derive(Debug, Parser)]
#[command(name = "sediment", version)]
struct Cli {
    /// Root directory for run outputs.
    #[arg(long, global = true, env = "SEDIMENT_OUT", default_value = "runs")]
    out_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Easy,
    Standard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AnalyzeMode {
    ProposalRecall,
    RecallVsIou,
    PrCurves,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic dataset with annotations and a manifest.
    Synth {
        /// Scene spec JSON; overrides --preset.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "standard")]
        preset: Preset,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dataset directory; defaults to `<out-root>/datasets/<spec hash>-<n>-<seed>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one configuration on the train split of its dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's dataset directory.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Score a checkpoint on one dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Recall and precision-recall curves as CSV plus a plot.
    Analyze {
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, value_enum)]
        mode: AnalyzeMode,
        /// Largest proposal count for proposal-recall, fixed count for recall-vs-iou.
        #[arg(long, default_value_t = 600)]
        proposals: usize,
    },
    /// Draw detections above a score threshold onto images.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// PNG files to draw on.
        #[arg(long, num_args = 1.., conflicts_with = "dataset")]
        images: Vec<PathBuf>,
        /// Dataset whose split is drawn instead of --images.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value_t = sediment::eval::DEFAULT_OVERLAY_THRESHOLD)]
        threshold: f64,
    },
    /// Train and evaluate every row and seed of an ablation matrix.
    Matrix {
        #[arg(long)]
        matrix: PathBuf,
        /// Overrides the base config's dataset directory.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    let out = cli.out_root;
    match cli.command {
        Command::Synth { spec, preset, n, seed, out: dir } => commands::synth(&out, spec.as_deref(), preset, n, seed, dir),
        Command::Train { config, dataset } => commands::train(&out, &config, dataset.as_deref()).map(|_| ()),
        Command::Eval { checkpoint, dataset, split } => commands::eval(&out, &checkpoint, &dataset, split),
        Command::Analyze { checkpoint, dataset, split, mode, proposals } => {
            commands::analyze(&out, &checkpoint, &dataset, split, mode, proposals)
        }
        Command::Render { checkpoint, images, dataset, split, threshold } => {
            commands::render(&out, &checkpoint, &images, dataset.as_deref(), split, threshold)
        }
        Command::Matrix { matrix, dataset } => commands::matrix(&out, &matrix, dataset.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
