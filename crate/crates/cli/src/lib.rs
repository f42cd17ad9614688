//! The `schemata` command-line tool.

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use schemata_core::evaluation::Task;

pub mod commands;
pub mod config;

/// Exit code for usage and validation errors.
pub const EXIT_USAGE: i32 = 2;
/// Exit code for failures while running a valid command.
pub const EXIT_RUNTIME: i32 = 1;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<schemata_core::Error> for CliError {
    fn from(e: schemata_core::Error) -> Self {
        if e.is_input_error() {
            CliError::Usage(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

pub(crate) fn write_err(e: std::io::Error) -> CliError {
    CliError::Runtime(format!("write failed: {e}"))
}

#[derive(Debug, Parser)]
#[command(
    name = "schemata",
    version,
    about = "Scene graph classification with learned class schemata"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on scenes and/or knowledge-base triples.
    Train(TrainArgs),
    /// Recall of a checkpoint on a dataset, per assimilation step.
    Eval(EvalArgs),
    /// Rank predicates for class pairs from schemata alone.
    LinkPredict(LinkArgs),
    /// Write a schema matrix as CSV.
    Export(ExportArgs),
    /// Generate a synthetic world: vocabulary, scenes and triples.
    Synth(SynthArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// Flat TOML file of hyperparameters and paths.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Newline-delimited scene records.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Newline-delimited class-level triples.
    #[arg(long)]
    pub kb: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Epoch log (newline-delimited JSON); defaults to `<out>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub assimilations: Option<usize>,
    /// Any configuration key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ReportFormat {
    Text,
    Json,
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Must match the checkpoint's vocabulary when given.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, value_parser = parse_task)]
    pub task: Task,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub constrained: bool,
    #[arg(long, value_delimiter = ',', default_value = "20,50,100")]
    pub k: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    pub assimilations: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Threads evaluating disjoint runs of batches.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
    pub format: ReportFormat,
    /// Also write a table with one row per step and one column per metric and K.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse::<Task>().map_err(|e| e.to_string())
}

#[derive(Debug, clap::Args)]
pub struct LinkArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Newline-delimited `{"head": ..., "tail": ...}` class pairs.
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub top: usize,
    /// Output file; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchemaKind {
    ObjectSchema,
    PredicateSchema,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ExportFormat {
    Csv,
}

#[derive(Debug, clap::Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, value_enum)]
    pub what: SchemaKind,
    #[arg(long, value_enum, default_value_t = ExportFormat::Csv)]
    pub format: ExportFormat,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct SynthArgs {
    /// World knobs (TOML or JSON) or a complete world (JSON with a `pkg` field).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub object_classes: Option<usize>,
    #[arg(long)]
    pub predicate_classes: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub train_scenes: Option<usize>,
    #[arg(long)]
    pub test_scenes: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub occlusion: Option<f64>,
}

#[derive(Debug, clap::Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Swap in a deliberately wrong backward pass (negative control).
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => commands::train(a, out),
        Command::Eval(a) => commands::eval(a, out),
        Command::LinkPredict(a) => commands::link_predict(a, out),
        Command::Export(a) => commands::export(a, out),
        Command::Synth(a) => commands::synth(a, out),
        Command::Gradcheck(a) => commands::gradcheck(a, out),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
