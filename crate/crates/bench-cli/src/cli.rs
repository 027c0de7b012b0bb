use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use dbsa_core::pipeline::{Method, MethodConfig, DEFAULT_BLOCK_SIZE};
use dbsa_core::retrieval::{Granularity, GroupingStrategy, OrderingStrategy, DEFAULT_RATIO};
use dbsa_core::sparse_mask::{AttentionPattern, DEFAULT_LOCAL_BLOCKS};

#[derive(Debug, Parser)]
#[command(name = "dbsa", version, about = "Block-sparse many-shot ICL: encode, infer, benchmark, ablate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a randomly initialised model file.
    InitModel(InitModelArgs),
    /// Write a synthetic associative-recall dataset (pool, test, labels).
    Synth(SynthArgs),
    /// Encode a demonstration pool into a cache directory.
    Encode(EncodeArgs),
    /// Answer one query against an encoded pool.
    Infer(InferArgs),
    /// Run methods over a test set and write reports.
    Bench(BenchArgs),
    /// Run ablation grids and write one row per configuration.
    Ablate(AblateArgs),
    /// KV-cache storage per token and for given context lengths.
    Storage(StorageArgs),
    /// Amortized cost per request from a bench timings file.
    Amortize(AmortizeArgs),
}

/// Settings shared by every command that encodes or queries a pool.
#[derive(Debug, Clone, Args)]
pub struct MethodArgs {
    #[arg(long, default_value_t = DEFAULT_BLOCK_SIZE)]
    pub block_size: usize,
    #[arg(long, default_value_t = DEFAULT_LOCAL_BLOCKS)]
    pub local_blocks: usize,
    /// full | sink-prev-self | sink-self | self
    #[arg(long, default_value = "sink-prev-self")]
    pub pattern: String,
    #[arg(long, default_value_t = DEFAULT_RATIO)]
    pub ratio: f64,
    /// block | example
    #[arg(long, default_value = "block")]
    pub granularity: String,
    /// random | clustered | clustered-diverse
    #[arg(long, default_value = "random")]
    pub grouping: String,
    /// in-order | low-to-high | reverse
    #[arg(long, default_value = "in-order")]
    pub ordering: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Refuse pools longer than this many tokens.
    #[arg(long)]
    pub max_pool_tokens: Option<usize>,
}

impl MethodArgs {
    pub fn config(&self, method: Method, seed: u64) -> dbsa_core::Result<MethodConfig> {
        let cfg = MethodConfig {
            method,
            pattern: AttentionPattern::parse(&self.pattern, self.local_blocks)?,
            block_size: self.block_size,
            ratio: self.ratio,
            granularity: Granularity::parse(&self.granularity)?,
            grouping: GroupingStrategy::parse(&self.grouping, seed)?,
            ordering: OrderingStrategy::parse(&self.ordering)?,
            seed,
            max_pool_tokens: self.max_pool_tokens,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Model file written by `init-model`.
    #[arg(long)]
    pub model: PathBuf,
    /// Demonstration pool, JSON lines with "query" and "answer".
    #[arg(long)]
    pub pool: PathBuf,
    /// Label set, one per line.
    #[arg(long)]
    pub labels: PathBuf,
}

#[derive(Debug, Args)]
pub struct InitModelArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// JSON model config; the built-in tiny config when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory for pool.jsonl, test.jsonl and labels.txt.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub pool_size: usize,
    #[arg(long, default_value_t = 50)]
    pub test_size: usize,
    #[arg(long, default_value_t = 4)]
    pub n_labels: usize,
    #[arg(long, default_value_t = 200)]
    pub n_keys: usize,
    #[arg(long, default_value_t = 2)]
    pub filler_words: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub method: MethodArgs,
    /// Output directory for the cache, index sidecar and manifest.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub method: MethodArgs,
    /// Directory written by `encode`.
    #[arg(long)]
    pub cache: PathBuf,
    #[arg(long)]
    pub query: String,
    /// dbsa | fixed | ret | zero-shot
    #[arg(long = "method", default_value = "dbsa")]
    pub method_name: String,
    /// Also write the result as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub method: MethodArgs,
    /// Test set, JSON lines.
    #[arg(long)]
    pub test: PathBuf,
    /// Comma-separated methods.
    #[arg(long, default_value = "dbsa,fixed,ret,zero-shot")]
    pub methods: String,
    /// Runs with seeds seed, seed+1, ...
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    /// Name recorded in the report; the pool file stem by default.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub method: MethodArgs,
    #[arg(long)]
    pub test: PathBuf,
    /// pattern | granularity | grouping | ordering | all
    #[arg(long, default_value = "all")]
    pub axis: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StorageArgs {
    /// Take the shape from a model file instead of the flags below.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub layers: usize,
    #[arg(long, default_value_t = 8)]
    pub kv_heads: usize,
    #[arg(long, default_value_t = 128)]
    pub head_dim: usize,
    /// 2 (fp16/bf16) or 4 (f32).
    #[arg(long, default_value_t = 2)]
    pub bytes_per_value: u64,
    /// Comma-separated context lengths.
    #[arg(long, default_value = "1000,10000,30000,90000")]
    pub tokens: String,
    /// Directory for storage.csv / storage.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AmortizeArgs {
    /// timings.json written by `bench`.
    #[arg(long)]
    pub report: PathBuf,
    /// Comma-separated request counts.
    #[arg(long, default_value = "1,2,5,10,20,50,100,200,500,1000,10000,100000,1000000")]
    pub requests: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
