//! Report rows and their CSV/JSON files. Every CSV has a JSON twin holding
//! exactly the same records.
//!
//! | file                | columns |
//! |---------------------|---------|
//! | `report.csv`        | method, dataset, run, seed, config_digest, accuracy, n_queries, mean_context_tokens, mean_attended_pairs, mean_attention_flops, cache_bytes |
//! | `summary.csv`       | method, dataset, config_digest, runs, accuracy_mean, accuracy_stdev, attended_pairs_mean, attended_pairs_stdev, attention_flops_mean, context_tokens_mean |
//! | `timings.csv`       | method, run, seed, setup_seconds, n_requests, mean_query_seconds, stdev_query_seconds, mean_retrieval_seconds, mean_assembly_seconds, mean_reencode_seconds, mean_scoring_seconds |
//! | `ablation.csv`      | axis, setting, method, config_digest, accuracy, n_queries, mean_context_tokens, mean_attended_pairs, encode_attended_pairs, block_sparsity, token_sparsity |
//! | `storage.csv`       | tokens, bytes_per_token, total_bytes, mib, gib, gb |
//! | `amortize.csv`      | method, requests, setup_seconds, mean_query_seconds, amortized_seconds |
//!
//! Only `timings.*` and the manifest carry wall-clock values, so the other
//! files are byte-identical across reruns with the same seeds.

use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub dataset: String,
    pub run: usize,
    pub seed: u64,
    pub config_digest: String,
    pub accuracy: f64,
    pub n_queries: usize,
    pub mean_context_tokens: f64,
    pub mean_attended_pairs: f64,
    pub mean_attention_flops: f64,
    pub cache_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub dataset: String,
    pub config_digest: String,
    pub runs: usize,
    pub accuracy_mean: f64,
    pub accuracy_stdev: f64,
    pub attended_pairs_mean: f64,
    pub attended_pairs_stdev: f64,
    pub attention_flops_mean: f64,
    pub context_tokens_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub method: String,
    pub run: usize,
    pub seed: u64,
    pub setup_seconds: f64,
    pub n_requests: usize,
    pub mean_query_seconds: f64,
    pub stdev_query_seconds: f64,
    pub mean_retrieval_seconds: f64,
    pub mean_assembly_seconds: f64,
    pub mean_reencode_seconds: f64,
    pub mean_scoring_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCsvRow {
    pub axis: String,
    pub setting: String,
    pub method: String,
    pub config_digest: String,
    pub accuracy: f64,
    pub n_queries: usize,
    pub mean_context_tokens: f64,
    pub mean_attended_pairs: f64,
    pub encode_attended_pairs: u64,
    pub block_sparsity: f64,
    pub token_sparsity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageRow {
    pub tokens: u64,
    pub bytes_per_token: u64,
    pub total_bytes: u64,
    pub mib: f64,
    pub gib: f64,
    pub gb: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmortizeRow {
    pub method: String,
    pub requests: u64,
    pub setup_seconds: f64,
    pub mean_query_seconds: f64,
    pub amortized_seconds: f64,
}

/// Write `rows` to `<dir>/<stem>.csv` and `<dir>/<stem>.json`.
pub fn write_table<T: Serialize>(dir: &Path, stem: &str, rows: &[T]) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let mut w = csv::Writer::from_path(&csv_path).with_context(|| format!("writing {}", csv_path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let json_path = dir.join(format!("{stem}.json"));
    let mut json = serde_json::to_string_pretty(rows)?;
    json.push('\n');
    std::fs::write(&json_path, json).with_context(|| format!("writing {}", json_path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut json = serde_json::to_string_pretty(value)?;
    json.push('\n');
    std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))
}
