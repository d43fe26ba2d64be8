//! `midtune`: the semantic-form mid-tuning pipeline from corpus ingestion to
//! evaluation.
//!
//! Exit status: 0 success, 1 usage error, 2 data or validation error,
//! 3 numerical divergence during training.

mod commands;
mod settings;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Divergence(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Divergence(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Divergence(m) => f.write_str(m),
        }
    }
}

#[derive(Parser)]
#[command(name = "midtune", version, about = "Align sentence encoders with semantic forms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a JSONL or CoNLL corpus and write it as JSONL.
    Ingest(IngestArgs),
    /// Generate a synthetic corpus with exact semantic forms.
    Synth(SynthArgs),
    /// Build a vocabulary from one or more corpora.
    Vocab(VocabArgs),
    /// Build a classification or triplet training set.
    BuildDataset(BuildDatasetArgs),
    /// Mid-tune a dual encoder.
    Midtune(MidtuneArgs),
    /// Embed a corpus into a KNN index.
    Embed(EmbedArgs),
    /// Query a KNN index.
    Knn(KnnArgs),
    /// Alignment report, probes and correlations for a trained model.
    Eval(EvalArgs),
}

// Unset flags serialize to null and are dropped before merging.

#[derive(Args, Serialize)]
struct IngestArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    /// `jsonl` or `conll`; inferred from the extension when omitted.
    #[arg(long)]
    format: Option<String>,
    /// Sentence id prefix for CoNLL input.
    #[arg(long)]
    id_prefix: Option<String>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct SynthArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Number of training sentences.
    #[arg(long)]
    n: Option<usize>,
    /// Number of additional held-out sentences.
    #[arg(long)]
    heldout: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    heldout_output: Option<PathBuf>,
    #[arg(long)]
    id_prefix: Option<String>,
}

#[derive(Args, Serialize)]
struct VocabArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Corpus file; repeat for several.
    #[arg(long)]
    corpus: Option<Vec<PathBuf>>,
    #[arg(long)]
    min_count: Option<usize>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct BuildDatasetArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// `triplet` or `classification`.
    #[arg(long)]
    objective: Option<String>,
    /// Corruption weights, e.g. `delete_role=1,mismatch=2`, or `uniform`.
    #[arg(long)]
    mix: Option<String>,
    #[arg(long)]
    negatives_per_anchor: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct MidtuneArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Model directory to create or overwrite.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    objective: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Share parameters between the sentence and form encoders.
    #[arg(long)]
    tied: Option<bool>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    /// Also export the form encoder next to the sentence encoder.
    #[arg(long)]
    export_form_encoder: Option<bool>,
}

#[derive(Args, Serialize)]
struct EmbedArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct KnnArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    query: Option<String>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    k: Option<u64>,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    heldout: Option<PathBuf>,
    /// Corpus for probes and correlations; defaults to the held-out corpus.
    #[arg(long)]
    probe_corpus: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    probe_output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    probe_steps: Option<usize>,
    #[arg(long)]
    length_buckets: Option<usize>,
    #[arg(long)]
    correlation_pairs: Option<usize>,
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Ingest(a) => commands::ingest(settings::resolve(a.config.as_deref(), &a)?),
        Command::Synth(a) => commands::synth(settings::resolve(a.config.as_deref(), &a)?),
        Command::Vocab(a) => commands::vocab(settings::resolve(a.config.as_deref(), &a)?),
        Command::BuildDataset(a) => commands::build_dataset(settings::resolve(a.config.as_deref(), &a)?),
        Command::Midtune(a) => commands::midtune(settings::resolve(a.config.as_deref(), &a)?),
        Command::Embed(a) => commands::embed(settings::resolve(a.config.as_deref(), &a)?),
        Command::Knn(a) => commands::knn(settings::resolve(a.config.as_deref(), &a)?),
        Command::Eval(a) => commands::eval(settings::resolve(a.config.as_deref(), &a)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
