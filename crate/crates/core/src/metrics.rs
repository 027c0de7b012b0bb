//! Efficiency ledger: attention FLOP model, timing summaries and amortized
//! cost.

use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;

/// Work done by one or more forward passes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionWork {
    /// (query token, key token) pairs that took part in attention.
    pub attended_pairs: u64,
    /// Token rows pushed through the projections.
    pub rows: u64,
}

impl std::ops::AddAssign for AttentionWork {
    fn add_assign(&mut self, rhs: Self) {
        self.attended_pairs += rhs.attended_pairs;
        self.rows += rhs.rows;
    }
}

/// Pairs attended by `rows` query tokens placed after `context` keys, with
/// causal attention among themselves.
pub fn query_work(context: u64, rows: u64) -> AttentionWork {
    AttentionWork {
        attended_pairs: rows * context + rows * (rows + 1) / 2,
        rows,
    }
}

/// Multiply-add FLOPs of attention: `QK^T` and `AV` each cost
/// `2 · head_dim` per pair per query head per layer, plus the Q/K/V/O
/// projections for every row.
pub fn flops_attention(work: AttentionWork, config: &ModelConfig) -> u64 {
    let hd = config.head_dim as u64;
    let heads = config.n_heads as u64;
    let layers = config.n_layers as u64;
    let d = config.d_model as u64;
    let q_width = heads * hd;
    let kv_width = config.n_kv_heads as u64 * hd;
    let attention = 2 * work.attended_pairs * hd * heads * layers * 2;
    let projections = work.rows * layers * (2 * d * (q_width + 2 * kv_width) + 2 * q_width * d);
    attention + projections
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SetupMetrics {
    pub encode_seconds: f64,
    pub index_seconds: f64,
    pub encode_work: AttentionWork,
    pub n_blocks: usize,
    pub n_tokens: usize,
    pub cache_bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub retrieval_seconds: f64,
    pub assembly_seconds: f64,
    /// Dense re-encoding of retrieved text (retrieval ICL only).
    pub reencode_seconds: f64,
    pub scoring_seconds: f64,
    /// Tokens in the context the query attended to.
    pub context_tokens: usize,
    pub work: AttentionWork,
    pub attention_flops: u64,
}

impl QueryMetrics {
    pub fn total_seconds(&self) -> f64 {
        self.retrieval_seconds + self.assembly_seconds + self.reencode_seconds + self.scoring_seconds
    }
}

/// Per-method ledger over a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub setup_seconds: f64,
    pub per_query_seconds: Vec<f64>,
    pub attended_tokens: Vec<u64>,
    pub attention_flops: Vec<u64>,
    pub cache_bytes: u64,
    pub n_requests: usize,
}

impl Metrics {
    pub fn push(&mut self, q: &QueryMetrics) {
        self.per_query_seconds.push(q.total_seconds());
        self.attended_tokens.push(q.work.attended_pairs);
        self.attention_flops.push(q.attention_flops);
        self.n_requests += 1;
    }

    /// Fold another worker's queries into this ledger.
    pub fn merge(&mut self, other: Metrics) {
        self.per_query_seconds.extend(other.per_query_seconds);
        self.attended_tokens.extend(other.attended_tokens);
        self.attention_flops.extend(other.attention_flops);
        self.n_requests += other.n_requests;
    }

    pub fn mean_query_seconds(&self) -> f64 {
        mean(&self.per_query_seconds)
    }

    /// Cost per request when `n` requests share one setup.
    pub fn amortized(&self, n: u64) -> f64 {
        amortized_cost(self.setup_seconds, self.mean_query_seconds(), n)
    }
}

pub fn amortized_cost(setup_seconds: f64, per_query_seconds: f64, n: u64) -> f64 {
    setup_seconds / n.max(1) as f64 + per_query_seconds
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Sample standard deviation; 0 for fewer than two values or constant input
/// (where rounding in the mean would otherwise leave a tiny residue).
pub fn stdev(xs: &[f64]) -> f64 {
    if xs.len() < 2 || xs.iter().all(|&x| x == xs[0]) {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}
