//! `ovsg`: batch front end for the open-vocabulary scene graph toolkit.
//!
//! Exit codes: 0 success, 1 domain failure (violations, rejected records,
//! contract errors, divergence), 2 IO or schema failure.

mod commands;
mod files;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "ovsg", version, about = "Open-vocabulary scene graph toolkit")]
struct Cli {
    /// Worker threads for parallel per-image work.
    #[arg(long, global = true, env = "OVSG_THREADS")]
    threads: Option<usize>,

    /// Where to write the run manifest (commands with --out-dir default to
    /// <out-dir>/manifest.json).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,

    /// More log output; repeat for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check a dataset against the graph invariants.
    Validate(ValidateArgs),
    /// Filter a dataset for an open-vocabulary setting.
    Split(SplitArgs),
    /// Extract triplets from a JSON-lines caption corpus.
    ParseCaptions(ParseCaptionsArgs),
    /// Normalize a synthesized-graph file, reporting rejected records.
    IngestSynth(IngestArgs),
    /// Build a text prompt with sampled negative names.
    Prompt(PromptArgs),
    /// Fine-tune a relation head in a synthetic world.
    Finetune(FinetuneArgs),
    /// Score predictions against ground truth.
    Evaluate(EvaluateArgs),
    /// Print a table from saved evaluation reports.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct ValidateArgs {
    pub dataset: PathBuf,
    /// Concept space or names-only lexicon to check categories against.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    pub dataset: PathBuf,
    /// closed, ovd, ovr or ovd_r; taken from --split-file when omitted.
    #[arg(long)]
    pub setting: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Use this split file instead of drawing novel sets.
    #[arg(long)]
    pub split_file: Option<PathBuf>,
    /// Vocabulary to draw novel sets from; defaults to the names used in the
    /// dataset.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct ParseCaptionsArgs {
    pub corpus: PathBuf,
    #[arg(long)]
    pub lexicon: PathBuf,
    /// JSON-lines output; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    pub file: PathBuf,
    /// Normalized records; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-record error report; stderr when omitted.
    #[arg(long)]
    pub errors: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PromptArgs {
    #[arg(long)]
    pub lexicon: PathBuf,
    /// Comma-separated positive names.
    #[arg(long, value_delimiter = ',')]
    pub positives: Vec<String>,
    #[arg(long, default_value_t = ovsg_core::prompt::DEFAULT_M)]
    pub m: usize,
    #[arg(long, default_value_t = ovsg_core::prompt::DEFAULT_BUDGET)]
    pub budget: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Emit the token list as JSON instead of the prompt string.
    #[arg(long)]
    pub json: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    /// JSON file with optional "world" and "finetune" sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for both the world and the run.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    /// Split file marking novel categories; closed when omitted.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// JSON evaluation config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// sgdet or predcls.
    #[arg(long)]
    pub protocol: Option<String>,
    /// base_plus_novel, novel_object, novel_relation, joint, or all.
    #[arg(long, default_value = "all")]
    pub partition: String,
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    #[arg(long)]
    pub micro: bool,
    /// Concept space for PredCls categorical matching.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Evaluation report files (single report or array).
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Exit code for a failed command.
fn exit_code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<ovsg_core::Error>() {
            return if e.is_domain() { 1 } else { 2 };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 2;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }

    let manifest = cli.manifest.clone();
    let outcome = match cli.command {
        Command::Validate(a) => commands::validate(a, manifest),
        Command::Split(a) => commands::split(a, manifest),
        Command::ParseCaptions(a) => commands::parse_captions(a, manifest),
        Command::IngestSynth(a) => commands::ingest_synth(a, manifest),
        Command::Prompt(a) => commands::prompt(a, manifest),
        Command::Finetune(a) => commands::finetune(a, manifest),
        Command::Evaluate(a) => commands::evaluate(a, manifest),
        Command::Report(a) => commands::report(a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
