//! `retgen` command-line tool.
//!
//! Every flag can also be set through an environment variable with the
//! `RETGEN_` prefix, e.g. `RETGEN_SEED=7` or `RETGEN_MAX_NEW_TOKENS=32`.
//! Exit codes: 0 success, 2 usage, 3 data, 4 numeric, 5 I/O.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "retgen", version, about = "Joint retrieval and generation with a single causal transformer")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, env = "RETGEN_CONFIG")]
    pub config: Option<PathBuf>,
    /// Seed for every random stream (default 42, or the config's `seed`).
    #[arg(long, global = true, env = "RETGEN_SEED")]
    pub seed: Option<u64>,
    /// Output file or directory.
    #[arg(long, global = true, env = "RETGEN_OUT")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a training dataset from JSONL records and a corpus.
    Reconstruct(ReconstructArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Embed the dataset corpus into a retrieval index.
    Embed(EmbedArgs),
    /// Generate from prompts in rag, el or plain mode.
    Infer(InferArgs),
    /// Forward-token accounting (count) or timing (timed) of scenarios.
    Bench(BenchArgs),
    /// Score transcripts against gold answers, references and entities.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    /// RAG_SINGLE, RAG_MULTI or EL.
    #[arg(long, env = "RETGEN_TEMPLATE")]
    pub template: String,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub dataset: PathBuf,
    /// One prompt per line.
    #[arg(long)]
    pub prompts: PathBuf,
    /// rag, el or plain.
    #[arg(long, env = "RETGEN_MODE", default_value = "rag")]
    pub mode: String,
    #[arg(long, env = "RETGEN_TOP_K")]
    pub top_k: Option<usize>,
    #[arg(long, env = "RETGEN_MAX_NEW_TOKENS")]
    pub max_new_tokens: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// TOML file with `[[scenario]]` tables.
    #[arg(long)]
    pub scenarios: PathBuf,
    /// count or timed.
    #[arg(long, env = "RETGEN_MODE", default_value = "count")]
    pub mode: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub transcripts: PathBuf,
    /// JSONL, one record per transcript.
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, env = "RETGEN_TOP_K")]
    pub top_k: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
