mod commands;
mod manifest;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "mmrank", version, about = "Retrieve-then-rerank toolkit for multimodal embeddings")]
struct Cli {
    /// Worker threads for parallel retrieval (output is identical for any value).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the seeded synthetic corpus to a directory.
    GenCorpus(GenCorpusArgs),
    /// Validate records against embeddings and write an embedding store.
    Ingest(IngestArgs),
    /// Exact top-k cosine retrieval into a TREC run file.
    Search(SearchArgs),
    /// Mine hard negatives from top-k retrieval.
    Mine(MineArgs),
    /// Train the projection head with the contrastive objective.
    TrainHead(TrainHeadArgs),
    /// Train the toy reranker on mined negatives.
    TrainReranker(TrainRerankerArgs),
    /// Rerank the head of a run file and fuse scores.
    Rerank(RerankArgs),
    /// Evaluate a run file against qrels; prints a JSON report.
    Eval(EvalArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenCorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 500)]
    pub docs: usize,
    #[arg(long, default_value_t = 100)]
    pub queries: usize,
    #[arg(long, default_value_t = 400)]
    pub train_queries: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct IngestArgs {
    /// JSONL records, one per line.
    #[arg(long)]
    pub records: PathBuf,
    /// Precomputed embedding store whose ids must match the records exactly.
    #[arg(long, conflicts_with = "embedder", required_unless_present = "embedder")]
    pub embeddings: Option<PathBuf>,
    /// Base URL of an embedding service.
    #[arg(long)]
    pub embedder: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SearchArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(short, long, default_value_t = 100)]
    pub k: usize,
    /// `global` or `local:<tag>`.
    #[arg(long, default_value = "global")]
    pub pool: String,
    /// Tab-separated `id<TAB>tag` lines; required for local pools.
    #[arg(long)]
    pub datasets: Option<PathBuf>,
    /// Projection head applied to both sides before retrieval.
    #[arg(long)]
    pub head: Option<PathBuf>,
    #[arg(long, default_value = "mmrank")]
    pub tag: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct MineArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub qrels: PathBuf,
    #[arg(long, default_value_t = mmrank::rank_training::DEFAULT_MINING_DEPTH)]
    pub depth: usize,
    #[arg(long, default_value = "global")]
    pub pool: String,
    #[arg(long)]
    pub datasets: Option<PathBuf>,
    #[arg(long)]
    pub head: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainHeadArgs {
    /// JSONL training pairs.
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = mmrank::contrastive::DEFAULT_LEARNING_RATE)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = mmrank::contrastive::DEFAULT_TEMPERATURE)]
    pub temperature: f64,
    #[arg(long)]
    pub out_dim: Option<usize>,
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainRerankerArgs {
    /// JSONL hard-negative sets from `mine`.
    #[arg(long)]
    pub negatives: PathBuf,
    #[arg(long)]
    pub qrels: PathBuf,
    /// Stores holding every query and candidate vector; repeatable.
    #[arg(long, required = true)]
    pub embeddings: Vec<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.5)]
    pub lr: f64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1.0)]
    pub point_weight: f64,
    #[arg(long, default_value_t = 1.0)]
    pub list_weight: f64,
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Pointwise,
    Listwise,
}

#[derive(Debug, Args, Serialize)]
pub struct RerankArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// JSONL records for queries and candidates; repeatable.
    #[arg(long, required = true)]
    pub records: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::Pointwise)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = mmrank::reranker::DEFAULT_RERANK_DEPTH)]
    pub depth: usize,
    #[arg(long, default_value_t = mmrank::reranker::DEFAULT_ALPHA)]
    pub alpha: f64,
    /// Min-max scale retrieval scores over the reranked block.
    #[arg(long)]
    pub normalize_ret: bool,
    /// `mock[:seed]`, `oracle`, `toy:<scorer.json>` or `http:<url>`. Defaults
    /// to `http:$MMRANK_SCORER_URL` when that variable is set.
    #[arg(long)]
    pub scorer: Option<String>,
    /// Relevance judgments for the oracle scorer.
    #[arg(long)]
    pub qrels: Option<PathBuf>,
    /// Stores for the toy scorer; repeatable.
    #[arg(long)]
    pub embeddings: Vec<PathBuf>,
    #[arg(long, default_value_t = 30.0)]
    pub timeout_secs: f64,
    #[arg(long, default_value_t = mmrank::scorer_gateway::DEFAULT_RETRIES)]
    pub retries: usize,
    #[arg(long, default_value_t = mmrank::scorer_gateway::DEFAULT_MAX_INFLIGHT)]
    pub max_inflight: usize,
    #[arg(long, default_value = "mmrank-rerank")]
    pub tag: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub qrels: PathBuf,
    #[arg(long, default_value = "recall@1,recall@5,recall@10,map@5")]
    pub metrics: String,
    /// Defaults to the run file name.
    #[arg(long)]
    pub run_id: Option<String>,
    #[arg(long, default_value = "global")]
    pub pool_mode: String,
    /// Also write the report here (with a run manifest).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Transport(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Transport(_) => 3,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Failure::Usage(_) => "usage",
            Failure::Data(_) => "data",
            Failure::Transport(_) => "transport",
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Transport(m) => m,
        }
    }
}

pub type CmdResult<T> = Result<T, Failure>;

/// Attaches context and a failure class to any displayable error.
pub trait Classify<T> {
    fn data(self, context: impl fmt::Display) -> CmdResult<T>;
    fn usage(self, context: impl fmt::Display) -> CmdResult<T>;
}

impl<T, E: fmt::Display> Classify<T> for Result<T, E> {
    fn data(self, context: impl fmt::Display) -> CmdResult<T> {
        self.map_err(|e| Failure::Data(format!("{context}: {e}")))
    }

    fn usage(self, context: impl fmt::Display) -> CmdResult<T> {
        self.map_err(|e| Failure::Usage(format!("{context}: {e}")))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return fail(Failure::Usage(format!("--threads: {e}")));
        }
    }
    let result = match cli.command {
        Command::GenCorpus(a) => commands::gen_corpus(a),
        Command::Ingest(a) => commands::ingest(a),
        Command::Search(a) => commands::search(a),
        Command::Mine(a) => commands::mine(a),
        Command::TrainHead(a) => commands::train_head(a),
        Command::TrainReranker(a) => commands::train_reranker(a),
        Command::Rerank(a) => commands::rerank(a),
        Command::Eval(a) => commands::eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(f),
    }
}

fn fail(f: Failure) -> ExitCode {
    eprintln!("{}", serde_json::json!({ "error": f.kind(), "message": f.message() }));
    ExitCode::from(f.code())
}
