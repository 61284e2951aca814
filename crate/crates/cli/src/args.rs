use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "deepinsight",
    version,
    about = "Hierarchical proof data, verifier rewards, judging and audit"
)]
pub struct Cli {
    /// TOML config file; flags and environment override it.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// Debug logging and the effective config on stderr.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    /// Seed for sampling and fixture generation.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Chat-completions base URL, e.g. http://127.0.0.1:8089/v1.
    #[arg(long, global = true, value_name = "URL")]
    pub endpoint: Option<String>,
    /// Upper bound on concurrent provider calls.
    #[arg(long, global = true, value_name = "N")]
    pub max_in_flight: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Annotate a base corpus into hierarchical records.
    Annotate(AnnotateArgs),
    /// Re-parse a corpus file and report invalid lines.
    Validate(InputArgs),
    /// Technique statistics of a corpus file.
    Stats(InputArgs),
    /// Write per-stage SFT files for a curriculum schedule.
    EmitStages(EmitStagesArgs),
    /// Judge benchmark proofs with one or more judge models.
    Judge(JudgeArgs),
    /// Verifier rewards and group advantages for one question.
    Reward(RewardArgs),
    /// Token entropy traces, spikes and the toy-model bound.
    #[command(subcommand)]
    Entropy(EntropyCommand),
    /// Human-audit sampling, score ingestion and calibration.
    #[command(subcommand)]
    Audit(AuditCommand),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Run a scripted chat-completions server on loopback.
    MockLlm(MockLlmArgs),
}

#[derive(Debug, Args)]
pub struct InputArgs {
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    /// Base corpus JSONL with id, question and proof.
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    #[arg(long)]
    pub max_attempts: Option<u32>,
    #[arg(long)]
    pub model: Option<String>,
    /// Exit 1 when more than this fraction of records is not accepted.
    #[arg(long, default_value_t = 1.0)]
    pub max_failure_rate: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScheduleArg {
    Three,
    Two,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TargetArg {
    Original,
    Annotated,
}

#[derive(Debug, Args)]
pub struct EmitStagesArgs {
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value = "three")]
    pub schedule: ScheduleArg,
    #[arg(long, value_enum, default_value = "annotated")]
    pub target: TargetArg,
    #[arg(long)]
    pub system_prompt: Option<String>,
    #[arg(long, default_value_t = deepinsight_core::curriculum::DEFAULT_EPOCHS)]
    pub epochs: u32,
}

#[derive(Debug, Args)]
pub struct JudgeArgs {
    /// Benchmark JSONL with id and question.
    #[arg(long, value_name = "PATH")]
    pub benchmark: PathBuf,
    /// Benchmark name (fimo, putnam, hmmt or custom); defaults to the file stem.
    #[arg(long)]
    pub name: Option<String>,
    /// Proof source JSONL with id and proof.
    #[arg(long, value_name = "PATH")]
    pub proofs: PathBuf,
    /// Comma-separated judge model ids.
    #[arg(long, value_delimiter = ',', required = true)]
    pub judges: Vec<String>,
    /// Also write the report JSON here.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RewardArgs {
    /// Plain-text question.
    #[arg(long, value_name = "PATH")]
    pub question_file: PathBuf,
    /// JSONL, one JSON string per response.
    #[arg(long, value_name = "PATH")]
    pub responses_file: PathBuf,
    /// Verifier model id.
    #[arg(long)]
    pub model: Option<String>,
}

#[derive(Debug, Args)]
pub struct SpikeArgs {
    #[arg(long, default_value_t = 32)]
    pub window: usize,
    #[arg(long, default_value_t = 2.0)]
    pub threshold: f64,
}

#[derive(Debug, Subcommand)]
pub enum EntropyCommand {
    /// Per-token entropy CSV (position, token, entropy, is_spike).
    Trace {
        /// Logprob dump JSONL.
        #[arg(long, value_name = "PATH")]
        dump: PathBuf,
        /// CSV destination; stdout when omitted.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        #[command(flatten)]
        spikes: SpikeArgs,
    },
    /// Spike positions, optionally aligned to a record's technique phrases.
    Spikes {
        #[arg(long, value_name = "PATH")]
        dump: PathBuf,
        #[command(flatten)]
        spikes: SpikeArgs,
        /// Corpus JSONL holding the record the trace was generated from.
        #[arg(long, value_name = "PATH", requires = "id")]
        corpus: Option<PathBuf>,
        #[arg(long)]
        id: Option<String>,
        /// Byte distance within which a spike counts as a hit.
        #[arg(long, default_value_t = 16)]
        align_window: usize,
    },
    /// Enumerate a random toy model and check the δ^k bound.
    CheckBound {
        #[arg(long, default_value_t = 2)]
        techniques: usize,
        #[arg(long, default_value_t = 4)]
        reasoning: usize,
        #[arg(long, default_value_t = 1)]
        order: usize,
        #[arg(long, default_value_t = 8)]
        length: usize,
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
    },
}

#[derive(Debug, Subcommand)]
pub enum AuditCommand {
    /// Stratified sample from a judged pool into the audit store.
    Sample {
        /// Judged-item JSONL.
        #[arg(long, value_name = "PATH")]
        pool: PathBuf,
        #[arg(long, default_value_t = 4)]
        per_stratum: usize,
        #[arg(long, value_name = "DIR")]
        store: PathBuf,
    },
    /// Ingest human scores: JSONL of {sample_id, reviewer_id, scores}.
    Ingest {
        #[arg(long, value_name = "PATH")]
        scores: PathBuf,
        #[arg(long, value_name = "DIR")]
        store: PathBuf,
        /// Overwrite samples that are already scored.
        #[arg(long)]
        replace: bool,
    },
    /// Per-bin calibration of LLM against human totals.
    Report {
        #[arg(long, value_name = "DIR")]
        store: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, value_name = "ADDR")]
    pub bind: Option<std::net::SocketAddr>,
    #[arg(long, value_name = "DIR")]
    pub audit_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MockLlmArgs {
    /// Loopback port; 0 picks a free one.
    #[arg(long, default_value_t = 8089)]
    pub port: u16,
    /// MockScript JSON; without it every request is echoed back.
    #[arg(long, value_name = "PATH")]
    pub script: Option<PathBuf>,
}
