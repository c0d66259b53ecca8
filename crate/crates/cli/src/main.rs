//! `oob`: synthesize data, train the toy detector, optimize and evaluate
//! out-of-box triggers, and summarize runs.
//!
//! Exit status is 0 on success, 1 when a command fails at run time and 2 for
//! usage or configuration errors.

mod attack;
mod config;
mod evaluate;
mod report;
mod synth;
mod train;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

#[derive(Debug)]
pub enum CliError {
    /// One entry per problem found in the resolved configuration.
    Config(Vec<String>),
    Io { path: PathBuf, source: std::io::Error },
    Core(oob_core::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) | Self::Core(oob_core::Error::Config(_) | oob_core::Error::Argument(_)) => 2,
            _ => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Config(problems) => {
                write!(f, "invalid configuration ({} problem{}):", problems.len(), if problems.len() == 1 { "" } else { "s" })?;
                for p in problems {
                    write!(f, "\n  - {p}")?;
                }
                Ok(())
            }
            Self::Io { path, source } => write!(f, "{}: {source}", path.display()),
            Self::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<oob_core::Error> for CliError {
    fn from(e: oob_core::Error) -> Self {
        Self::Core(e)
    }
}

#[derive(Parser)]
#[command(name = "oob", version, about = "Universal out-of-bounding-box trigger attacks on object detectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic sign dataset or approach sequence.
    Synth(SynthArgs),
    /// Train the built-in toy detector and write a checkpoint.
    TrainDetector(TrainArgs),
    /// Optimize a universal trigger with PGD or UAPGD.
    Attack(AttackArgs),
    /// Measure ASR of a trigger on a dataset or frame sequence.
    Eval(EvalArgs),
    /// Combine run directories into one summary with comparison plots.
    Report(ReportArgs),
}

/// Flags shared by all commands.
#[derive(Args)]
struct Common {
    /// Flat JSON config; flags given on the command line take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    n: Option<String>,
    /// Square image side in pixels.
    #[arg(long)]
    size: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// Write an approach sequence instead of independent samples.
    #[arg(long)]
    sequence: bool,
    #[arg(long)]
    frames: Option<String>,
    #[arg(long)]
    frame_rate: Option<String>,
    #[arg(long)]
    scale_min: Option<String>,
    #[arg(long)]
    scale_max: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    learning_rate: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Trailing samples kept out of training and used for the reported rate.
    #[arg(long)]
    holdout: Option<String>,
}

#[derive(Args)]
struct PlacementArgs {
    /// below, above, left or right.
    #[arg(long)]
    placement: Option<String>,
    #[arg(long)]
    relative_scale: Option<String>,
    #[arg(long)]
    gap_fraction: Option<String>,
    #[arg(long)]
    target_class: Option<String>,
    #[arg(long)]
    threshold: Option<String>,
    /// Threads for per-image evaluation.
    #[arg(long)]
    workers: Option<String>,
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    placement: PlacementArgs,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    detector: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// Label used in summaries and plots; defaults to the output directory name.
    #[arg(long)]
    name: Option<String>,
    /// pgd or uapgd.
    #[arg(long)]
    mode: Option<String>,
    /// Add feature guidance to the objective.
    #[arg(long, overrides_with = "no_fg")]
    fg: bool,
    #[arg(long, overrides_with = "fg")]
    no_fg: bool,
    #[arg(long)]
    lambda_fg: Option<String>,
    #[arg(long)]
    lambda_tv: Option<String>,
    /// Initial step size, e.g. `16/255`.
    #[arg(long)]
    eta: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    trigger_height: Option<String>,
    #[arg(long)]
    trigger_width: Option<String>,
    /// Disable expectation over transformation.
    #[arg(long)]
    no_eot: bool,
    /// Dataset on which the final trigger's ASR is measured.
    #[arg(long)]
    eval_dataset: Option<String>,
    #[arg(long)]
    checkpoint_every: Option<String>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    placement: PlacementArgs,
    #[arg(long)]
    detector: Option<String>,
    #[arg(long)]
    dataset: Option<String>,
    /// Frame sequence directory, instead of a dataset.
    #[arg(long)]
    sequence: Option<String>,
    #[arg(long)]
    trigger: Option<String>,
    /// Evaluate clean images.
    #[arg(long)]
    no_trigger: bool,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    common: Common,
    /// Attack or eval output directories.
    runs: Vec<String>,
    #[arg(long)]
    out: Option<String>,
}

fn text(v: &Option<String>) -> Option<Value> {
    v.as_ref().map(|s| Value::from(s.as_str()))
}

fn switch(on: bool) -> Option<Value> {
    on.then_some(Value::Bool(true))
}

impl PlacementArgs {
    fn overrides(&self) -> Vec<(&'static str, Option<Value>)> {
        vec![
            ("placement", text(&self.placement)),
            ("relative_scale", text(&self.relative_scale)),
            ("gap_fraction", text(&self.gap_fraction)),
            ("target_class", text(&self.target_class)),
            ("threshold", text(&self.threshold)),
            ("workers", text(&self.workers)),
        ]
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => synth::run(
            a.common.config.as_deref(),
            vec![
                ("n", text(&a.n)),
                ("size", text(&a.size)),
                ("seed", text(&a.seed)),
                ("out", text(&a.out)),
                ("sequence", switch(a.sequence)),
                ("frames", text(&a.frames)),
                ("frame_rate", text(&a.frame_rate)),
                ("scale_min", text(&a.scale_min)),
                ("scale_max", text(&a.scale_max)),
            ],
        ),
        Command::TrainDetector(a) => train::run(
            a.common.config.as_deref(),
            vec![
                ("dataset", text(&a.dataset)),
                ("out", text(&a.out)),
                ("epochs", text(&a.epochs)),
                ("batch_size", text(&a.batch_size)),
                ("learning_rate", text(&a.learning_rate)),
                ("seed", text(&a.seed)),
                ("holdout", text(&a.holdout)),
            ],
        ),
        Command::Attack(a) => {
            let use_fg = if a.fg {
                Some(Value::Bool(true))
            } else if a.no_fg {
                Some(Value::Bool(false))
            } else {
                None
            };
            let mut overrides = a.placement.overrides();
            overrides.extend([
                ("dataset", text(&a.dataset)),
                ("detector", text(&a.detector)),
                ("out", text(&a.out)),
                ("name", text(&a.name)),
                ("mode", text(&a.mode)),
                ("use_fg", use_fg),
                ("lambda_fg", text(&a.lambda_fg)),
                ("lambda_tv", text(&a.lambda_tv)),
                ("eta0", text(&a.eta)),
                ("n_epoch", text(&a.epochs)),
                ("batch_size", text(&a.batch_size)),
                ("seed", text(&a.seed)),
                ("trigger_height", text(&a.trigger_height)),
                ("trigger_width", text(&a.trigger_width)),
                ("eot", a.no_eot.then_some(Value::Bool(false))),
                ("eval_dataset", text(&a.eval_dataset)),
                ("checkpoint_every", text(&a.checkpoint_every)),
            ]);
            attack::run(a.common.config.as_deref(), overrides, a.resume)
        }
        Command::Eval(a) => {
            let mut overrides = a.placement.overrides();
            overrides.extend([
                ("detector", text(&a.detector)),
                ("dataset", text(&a.dataset)),
                ("sequence", text(&a.sequence)),
                ("trigger", text(&a.trigger)),
                ("no_trigger", switch(a.no_trigger)),
                ("out", text(&a.out)),
                ("name", text(&a.name)),
            ]);
            evaluate::run(a.common.config.as_deref(), overrides)
        }
        Command::Report(a) => {
            let runs = (!a.runs.is_empty()).then(|| Value::from(a.runs.clone()));
            report::run(a.common.config.as_deref(), vec![("runs", runs), ("out", text(&a.out))])
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
