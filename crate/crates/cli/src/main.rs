//! `drnn`: vocabulary building, fragment extraction, training, evaluation,
//! generation, marker analysis and context-size sweeps.

mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use discourse_rnn::Architecture;
use serde::Serialize;

use crate::error::{CliError, EXIT_OK, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(name = "drnn", version, about = "Flat and hierarchical attentional conversation models")]
pub struct Cli {
    /// Seed for every random choice in the run.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Only print errors.
    #[arg(long, global = true)]
    pub quiet: bool,

    /// Resolve the configuration and write the run manifest without running.
    #[arg(long, global = true)]
    pub manifest_only: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a frequency-ordered vocabulary from a raw dialog corpus.
    BuildVocab(BuildVocabArgs),
    /// Cut a raw dialog corpus into context/target fragments.
    ExtractFragments(ExtractArgs),
    /// Train a model with SGD.
    Train(TrainArgs),
    /// Perplexity of a checkpoint on a fragment file.
    Eval(EvalArgs),
    /// Greedy responses, one line per input fragment.
    Generate(GenerateArgs),
    /// Discourse-marker rates over utterances or model output.
    Analyze(AnalyzeArgs),
    /// Train and evaluate one model per (architecture, N) cell.
    Sweep(SweepArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct BuildVocabArgs {
    /// Dialog text: one utterance per line, blank lines between dialogs.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Cap on the vocabulary, reserved tokens included.
    #[arg(long, default_value_t = 40_000)]
    pub max_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ExtractArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Context turns per fragment.
    #[arg(long, default_value_t = discourse_rnn::corpus::MAX_CONTEXT)]
    pub context_turns: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long)]
    pub emb_dim: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub attn_dim: Option<usize>,
}

/// One flag per training hyperparameter, named after the config field.
#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainFlags {
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub initial_lr: Option<f64>,
    #[arg(long)]
    pub decay_factor: Option<f64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience_steps: Option<usize>,
    #[arg(long)]
    pub checkpoint_interval: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    /// Uniform in ±0.08.
    Uniform,
    /// All zeros; the model predicts a uniform distribution.
    Zeros,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Training fragments, as written by extract-fragments.
    #[arg(long, required_unless_present = "overfit_smoke")]
    pub fragments: Option<PathBuf>,
    /// Validation fragments; without them learning-rate decay is off.
    #[arg(long)]
    pub valid: Option<PathBuf>,
    #[arg(long, required_unless_present = "overfit_smoke")]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub arch: Architecture,
    /// Context turns N fed to the encoder.
    #[arg(long, required_unless_present = "overfit_smoke")]
    pub context_turns: Option<usize>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub hyper: TrainFlags,
    #[arg(long, value_enum, default_value_t = InitKind::Uniform)]
    pub init: InitKind,
    /// Memorize the bundled 20-fragment corpus and require a per-token
    /// training loss below 0.1.
    #[arg(long, conflicts_with_all = ["fragments", "valid", "vocab"])]
    pub overfit_smoke: bool,
    /// Continue from the last checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub fragments: PathBuf,
    #[arg(long)]
    pub context_turns: usize,
    /// Name recorded in the report; defaults to the fragment file stem.
    #[arg(long)]
    pub dataset: Option<String>,
    /// JSON report.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub fragments: PathBuf,
    #[arg(long)]
    pub context_turns: usize,
    #[arg(long, default_value_t = discourse_rnn::corpus::MAX_UTTERANCE_LEN)]
    pub max_len: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step attention weights, one JSON array per fragment and line.
    #[arg(long)]
    pub attention_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct AnalyzeArgs {
    /// Utterances to scan, one per line; blank lines count as unmarked.
    #[arg(long, conflicts_with_all = ["checkpoint", "fragments"])]
    pub utterances: Option<PathBuf>,
    /// Analyze greedy output of this model instead.
    #[arg(long, requires_all = ["vocab", "fragments"])]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub fragments: Option<PathBuf>,
    /// Fragments to generate for, taken from the top of the file.
    #[arg(long, default_value_t = 100_000)]
    pub sample_size: usize,
    /// N: context turns fed to the model, and the report's label.
    #[arg(long, default_value_t = 1)]
    pub context_turns: usize,
    /// Lexicon override with [deixis], [anaphora] and
    /// [logical_consequence] sections.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// Report table.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-utterance flags: deixis, anaphora, logical consequence, text.
    #[arg(long)]
    pub flags_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub valid: Option<PathBuf>,
    #[arg(long)]
    pub test: PathBuf,
    /// Built from the training fragments when absent.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = Architecture::ALL)]
    pub archs: Vec<Architecture>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub context_turns: Vec<usize>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub hyper: TrainFlags,
    /// Tab-separated table: architecture, N, perplexity, stderr.
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let level = if cli.quiet { "error" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError { code, message }) => {
            eprintln!("drnn: {message}");
            ExitCode::from(code as u8)
        }
    }
}
