//! End-to-end methods: sparse pool encoding (Stage 1), per-query selection,
//! assembly and constrained label scoring (Stage 2), the baselines, and the
//! ablation runner.

use std::fmt;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Demonstration;
use crate::error::{Error, Result};
use crate::kv_store::{assemble, text_digest, ExampleSpan, SegmentedKvCache, Unit};
use crate::metrics::{flops_attention, query_work, AttentionWork, QueryMetrics, SetupMetrics};
use crate::model::{argmax_label, forward_encode, score_label, KvContext, ModelWeights, TokenSequence};
use crate::retrieval::{
    group, order, select, select_plain, BlockPartition, Bm25Index, Bm25Params, Granularity,
    GroupingStrategy, IndexDoc, OrderingStrategy, DEFAULT_RATIO,
};
use crate::sparse_mask::{build_block_mask, token_sparsity, AttentionPattern, TokenMask};
use crate::tensor::BoolMatrix;
use crate::tokenizer;

pub const DEFAULT_BLOCK_SIZE: usize = 50;

/// Text layout of demonstrations and queries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub query_marker: String,
    pub answer_marker: String,
    pub separator: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            query_marker: "Q: ".into(),
            answer_marker: "\nA:".into(),
            separator: "\n\n".into(),
        }
    }
}

impl PromptTemplate {
    /// `Q: {query}\nA: {answer}\n\n`
    pub fn render_demo(&self, d: &Demonstration) -> String {
        format!(
            "{}{}{} {}{}",
            self.query_marker, d.query, self.answer_marker, d.answer, self.separator
        )
    }

    /// `Q: {query}\nA:`
    pub fn render_query(&self, query: &str) -> String {
        format!("{}{}{}", self.query_marker, query, self.answer_marker)
    }

    /// Text scored after the rendered query for a label.
    pub fn label_continuation(&self, label: &str) -> String {
        format!(" {label}")
    }
}

/// A classification task: demonstration pool plus its closed label set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub pool: Vec<Demonstration>,
    pub labels: Vec<String>,
    pub template: PromptTemplate,
}

impl TaskSpec {
    pub fn new(pool: Vec<Demonstration>, labels: Vec<String>) -> Result<Self> {
        let task = Self {
            pool,
            labels,
            template: PromptTemplate::default(),
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::Invalid("label set is empty".into()));
        }
        let mut sorted = self.labels.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.labels.len() || sorted.iter().any(|l| l.trim().is_empty()) {
            return Err(Error::Invalid("labels must be distinct and non-empty".into()));
        }
        for (i, d) in self.pool.iter().enumerate() {
            d.validate()?;
            if !self.labels.contains(&d.answer) {
                return Err(Error::Invalid(format!(
                    "pool example {i} has answer {:?} outside the label set",
                    d.answer
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Sparse-encoded pool, per-query block retrieval and KV reuse.
    Dbsa,
    /// Whole cached pool for every query.
    FixedIcl,
    /// Per-query retrieved demonstrations, re-encoded densely from text.
    RetIcl,
    ZeroShot,
}

impl Method {
    pub const ALL: [Method; 4] = [Self::Dbsa, Self::FixedIcl, Self::RetIcl, Self::ZeroShot];

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "dbsa" => Ok(Self::Dbsa),
            "fixed" | "fixed-icl" => Ok(Self::FixedIcl),
            "ret" | "ret-icl" | "retrieval" => Ok(Self::RetIcl),
            "zero-shot" | "zero" => Ok(Self::ZeroShot),
            other => Err(Error::Invalid(format!("unknown method {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Dbsa => "dbsa",
            Self::FixedIcl => "fixed",
            Self::RetIcl => "ret",
            Self::ZeroShot => "zero-shot",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub method: Method,
    /// Stage-1 pattern; the local-block count lives in the pattern.
    pub pattern: AttentionPattern,
    pub block_size: usize,
    pub ratio: f64,
    pub granularity: Granularity,
    pub grouping: GroupingStrategy,
    pub ordering: OrderingStrategy,
    pub seed: u64,
    /// Upper bound on pool tokens, on top of the model's `max_seq_len`.
    pub max_pool_tokens: Option<usize>,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            method: Method::Dbsa,
            pattern: AttentionPattern::default(),
            block_size: DEFAULT_BLOCK_SIZE,
            ratio: DEFAULT_RATIO,
            granularity: Granularity::Block,
            grouping: GroupingStrategy::Random { seed: 0 },
            ordering: OrderingStrategy::InOrder,
            seed: 0,
            max_pool_tokens: None,
        }
    }
}

impl MethodConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 {
            return Err(Error::Invalid("block_size must be at least 1".into()));
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::Invalid(format!("ratio {} outside (0, 1]", self.ratio)));
        }
        if let GroupingStrategy::ClusteredDiverse { swap_fraction, .. } = self.grouping {
            if !(0.0..=1.0).contains(&swap_fraction) {
                return Err(Error::Invalid(format!("swap fraction {swap_fraction} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Short hex digest of the configuration.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockEncodeStats {
    pub block: usize,
    pub tokens: usize,
    pub context_tokens: usize,
    pub work: AttentionWork,
    pub seconds: f64,
}

/// Incremental Stage-1 encoder: each call encodes one block against the
/// rotated KV of the blocks the pattern lets it see.
pub struct PoolEncoder<'w> {
    weights: &'w ModelWeights,
    pattern: AttentionPattern,
    cache: SegmentedKvCache,
}

impl<'w> PoolEncoder<'w> {
    pub fn new(weights: &'w ModelWeights, pattern: AttentionPattern) -> Self {
        Self {
            weights,
            pattern,
            cache: SegmentedKvCache::new(weights.config()),
        }
    }

    /// Continue appending to an existing cache.
    pub fn resume(
        weights: &'w ModelWeights,
        pattern: AttentionPattern,
        cache: SegmentedKvCache,
    ) -> Result<Self> {
        if cache.config_hash() != weights.config_hash() {
            return Err(Error::ConfigHashMismatch {
                expected: weights.config_hash().to_string(),
                found: cache.config_hash().to_string(),
            });
        }
        Ok(Self {
            weights,
            pattern,
            cache,
        })
    }

    pub fn cache(&self) -> &SegmentedKvCache {
        &self.cache
    }

    pub fn finish(self) -> SegmentedKvCache {
        self.cache
    }

    /// Encode and append the next block. `examples` are (example id, byte
    /// span) pairs within `text`; bytes and tokens coincide for the byte
    /// tokenizer.
    pub fn append_block(&mut self, text: &str, examples: &[(usize, std::ops::Range<usize>)]) -> Result<BlockEncodeStats> {
        let started = Instant::now();
        let block = self.cache.n_blocks();
        let ids = tokenizer::encode(text);
        if ids.is_empty() {
            return Err(Error::Invalid(format!("block {block} is empty")));
        }
        let start = self.cache.total_tokens();
        let max = self.weights.config().max_seq_len;
        if start + ids.len() > max {
            return Err(Error::Position(format!(
                "pool needs {} positions, model allows {max}",
                start + ids.len()
            )));
        }
        let ctx_blocks: Vec<usize> = (0..block).filter(|&c| self.pattern.allows(block, c)).collect();
        let context = self.cache.original_context(&ctx_blocks)?;
        let n_ctx = context.len();
        let t = ids.len();
        let mask = BoolMatrix::from_fn(t, n_ctx + t, |r, c| c < n_ctx || c - n_ctx <= r);
        let tokens = TokenSequence::contiguous(ids, start);
        let out = forward_encode(self.weights, &tokens, &context, &mask)?;
        let spans = examples
            .iter()
            .map(|(id, r)| ExampleSpan {
                example_id: *id,
                offset: r.start,
                len: r.len(),
            })
            .collect();
        self.cache.append_block(
            block,
            out.kv,
            t,
            text_digest(text),
            spans,
            self.weights.config_hash(),
        )?;
        Ok(BlockEncodeStats {
            block,
            tokens: t,
            context_tokens: n_ctx,
            work: AttentionWork {
                attended_pairs: out.attended_pairs,
                rows: t as u64,
            },
            seconds: started.elapsed().as_secs_f64(),
        })
    }
}

/// Render a block of demonstrations, returning its text and per-example
/// byte spans.
pub fn render_block(
    template: &PromptTemplate,
    pool: &[Demonstration],
    members: &[usize],
) -> (String, Vec<(usize, std::ops::Range<usize>)>) {
    let mut text = String::new();
    let mut spans = Vec::with_capacity(members.len());
    for &e in members {
        let start = text.len();
        text.push_str(&template.render_demo(&pool[e]));
        spans.push((e, start..text.len()));
    }
    (text, spans)
}

/// Everything Stage 2 needs, produced once per pool.
#[derive(Debug, Clone)]
pub struct EncodedPool {
    pub pattern: AttentionPattern,
    pub partition: BlockPartition,
    pub block_texts: Vec<String>,
    pub cache: SegmentedKvCache,
    pub block_index: Bm25Index,
    pub example_index: Bm25Index,
    /// Whole pool in encoded order, rotated at original positions.
    pub full_context: KvContext,
    pub setup: SetupMetrics,
    pub encode_log: Vec<BlockEncodeStats>,
}

impl EncodedPool {
    pub fn index(&self, granularity: Granularity) -> &Bm25Index {
        match granularity {
            Granularity::Block => &self.block_index,
            Granularity::Example => &self.example_index,
        }
    }

    /// Setup time charged to `method`: cache encoding for the cached
    /// methods, index construction for the retrieving ones.
    pub fn setup_seconds(&self, method: Method) -> f64 {
        match method {
            Method::Dbsa => self.setup.encode_seconds + self.setup.index_seconds,
            Method::FixedIcl => self.setup.encode_seconds,
            Method::RetIcl => self.setup.index_seconds,
            Method::ZeroShot => 0.0,
        }
    }

    pub fn token_mask(&self) -> Result<TokenMask> {
        let lens = self.cache.blocks().iter().map(|b| b.token_count).collect();
        TokenMask::new(build_block_mask(self.cache.n_blocks(), self.pattern)?, lens)
    }
}

pub const CACHE_FILE: &str = "cache.bin";
/// Retrieval indexes, next to the cache file.
pub const INDEX_FILE: &str = "cache.index.json";
pub const POOL_FILE: &str = "pool.json";

#[derive(Serialize, Deserialize)]
struct PoolMeta {
    pattern: AttentionPattern,
    partition: BlockPartition,
    block_texts: Vec<String>,
    setup: SetupMetrics,
    encode_log: Vec<BlockEncodeStats>,
}

#[derive(Serialize, Deserialize)]
struct IndexSidecar {
    block: Bm25Index,
    example: Bm25Index,
}

impl EncodedPool {
    /// Write the cache, index sidecar and pool metadata into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.cache.save(&dir.join(CACHE_FILE))?;
        let sidecar = IndexSidecar {
            block: self.block_index.clone(),
            example: self.example_index.clone(),
        };
        std::fs::write(dir.join(INDEX_FILE), serde_json::to_vec(&sidecar)?)?;
        let meta = PoolMeta {
            pattern: self.pattern,
            partition: self.partition.clone(),
            block_texts: self.block_texts.clone(),
            setup: self.setup.clone(),
            encode_log: self.encode_log.clone(),
        };
        std::fs::write(dir.join(POOL_FILE), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }

    /// Load what [`EncodedPool::save`] wrote; the cache must match `weights`
    /// and every block text must match its cached digest.
    pub fn load(dir: &Path, weights: &ModelWeights) -> Result<Self> {
        let cache = SegmentedKvCache::load_for(&dir.join(CACHE_FILE), weights)?;
        let sidecar: IndexSidecar = serde_json::from_slice(&std::fs::read(dir.join(INDEX_FILE))?)?;
        let meta: PoolMeta = serde_json::from_slice(&std::fs::read(dir.join(POOL_FILE))?)?;
        if meta.block_texts.len() != cache.n_blocks()
            || meta.partition.n_blocks() != cache.n_blocks()
            || sidecar.block.len() != cache.n_blocks()
        {
            return Err(Error::Invalid("pool metadata does not match the cache".into()));
        }
        for (b, (text, entry)) in meta.block_texts.iter().zip(cache.blocks()).enumerate() {
            if text_digest(text) != entry.digest {
                return Err(Error::Invalid(format!("block {b} text does not match the cache")));
            }
        }
        let all: Vec<usize> = (0..cache.n_blocks()).collect();
        let full_context = cache.original_context(&all)?;
        Ok(Self {
            pattern: meta.pattern,
            partition: meta.partition,
            block_texts: meta.block_texts,
            cache,
            block_index: sidecar.block,
            example_index: sidecar.example,
            full_context,
            setup: meta.setup,
            encode_log: meta.encode_log,
        })
    }
}

fn example_text(d: &Demonstration) -> String {
    format!("{} {}", d.query, d.answer)
}

/// Stage 1: group the pool, encode blocks in order under the pattern, and
/// build the retrieval indexes.
pub fn encode_pool(weights: &ModelWeights, task: &TaskSpec, cfg: &MethodConfig) -> Result<EncodedPool> {
    task.validate()?;
    if task.pool.is_empty() {
        return Err(Error::Invalid("demonstration pool is empty".into()));
    }
    let texts: Vec<String> = task.pool.iter().map(example_text).collect();
    let partition = group(&texts, cfg.block_size, cfg.grouping)?;
    let rendered: Vec<_> = partition
        .blocks
        .iter()
        .map(|members| render_block(&task.template, &task.pool, members))
        .collect();
    let total: usize = rendered.iter().map(|(t, _)| t.len()).sum();
    if let Some(limit) = cfg.max_pool_tokens {
        if total > limit {
            return Err(Error::Invalid(format!(
                "pool has {total} tokens, limit is {limit}"
            )));
        }
    }
    if total > weights.config().max_seq_len {
        return Err(Error::Position(format!(
            "pool has {total} tokens, model max_seq_len is {}",
            weights.config().max_seq_len
        )));
    }

    let started = Instant::now();
    let mut encoder = PoolEncoder::new(weights, cfg.pattern);
    let mut setup = SetupMetrics::default();
    let mut encode_log = Vec::with_capacity(rendered.len());
    for (text, spans) in &rendered {
        let stats = encoder.append_block(text, spans)?;
        setup.encode_work += stats.work;
        encode_log.push(stats);
    }
    let cache = encoder.finish();
    let all: Vec<usize> = (0..cache.n_blocks()).collect();
    let full_context = cache.original_context(&all)?;
    setup.encode_seconds = started.elapsed().as_secs_f64();

    let started = Instant::now();
    let (block_index, example_index) = build_indexes(task, &partition)?;
    setup.index_seconds = started.elapsed().as_secs_f64();

    setup.n_blocks = cache.n_blocks();
    setup.n_tokens = cache.total_tokens();
    setup.cache_bytes = crate::kv_store::storage_bytes(weights.config(), cache.total_tokens() as u64, 4)?;

    Ok(EncodedPool {
        pattern: cfg.pattern,
        partition,
        block_texts: rendered.into_iter().map(|(t, _)| t).collect(),
        cache,
        block_index,
        example_index,
        full_context,
        setup,
        encode_log,
    })
}

fn build_indexes(task: &TaskSpec, partition: &BlockPartition) -> Result<(Bm25Index, Bm25Index)> {
    let mut block_docs = Vec::with_capacity(partition.n_blocks());
    let mut example_docs = Vec::with_capacity(partition.n_examples());
    for (b, members) in partition.blocks.iter().enumerate() {
        let mut block_text = Vec::with_capacity(members.len());
        for &e in members {
            let text = example_text(&task.pool[e]);
            example_docs.push(IndexDoc {
                unit: Unit::Example(e),
                block: b,
                rank: example_docs.len(),
                text: text.clone(),
            });
            block_text.push(text);
        }
        block_docs.push(IndexDoc {
            unit: Unit::Block(b),
            block: b,
            rank: b,
            text: block_text.join(" "),
        });
    }
    Ok((
        Bm25Index::build(block_docs, Granularity::Block, Bm25Params::default())?,
        Bm25Index::build(example_docs, Granularity::Example, Bm25Params::default())?,
    ))
}

/// Re-encode `texts` as consecutive blocks under `pattern`, returning the
/// rotated context. Encoding the first `m` blocks of a pool this way must
/// reproduce the cached prefix of that pool.
pub fn reencode_blocks(weights: &ModelWeights, texts: &[String], pattern: AttentionPattern) -> Result<(KvContext, AttentionWork)> {
    let mut encoder = PoolEncoder::new(weights, pattern);
    let mut work = AttentionWork::default();
    for t in texts {
        work += encoder.append_block(t, &[])?.work;
    }
    let cache = encoder.finish();
    let all: Vec<usize> = (0..cache.n_blocks()).collect();
    Ok((cache.original_context(&all)?, work))
}

/// Dense causal encoding of `text` from position 0.
pub fn encode_dense(weights: &ModelWeights, text: &str) -> Result<(KvContext, AttentionWork)> {
    if text.is_empty() {
        return Ok((KvContext::empty(weights), AttentionWork::default()));
    }
    reencode_blocks(weights, &[text.to_string()], AttentionPattern::Full)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inference {
    pub label: String,
    /// Summed label log-probabilities, in label-set order.
    pub scores: Vec<(String, f64)>,
    /// Units placed in context, in context order.
    pub units: Vec<Unit>,
    pub metrics: QueryMetrics,
}

/// Score every label after `query` with the given context and pick the best.
pub fn score_labels(
    weights: &ModelWeights,
    task: &TaskSpec,
    context: &KvContext,
    query: &str,
) -> Result<(String, Vec<(String, f64)>, AttentionWork)> {
    let query_ids = tokenizer::encode(&task.template.render_query(query));
    let mut scores = Vec::with_capacity(task.labels.len());
    let mut work = AttentionWork::default();
    for label in &task.labels {
        let label_ids = tokenizer::encode(&task.template.label_continuation(label));
        let s = score_label(weights, context, &query_ids, &label_ids)?;
        work += query_work(
            context.len() as u64,
            (query_ids.len() + label_ids.len() - 1) as u64,
        );
        scores.push((label.clone(), s));
    }
    let best = argmax_label(scores.iter().map(|(l, s)| (l.as_str(), *s)))
        .ok_or_else(|| Error::Invalid("label set is empty".into()))?
        .to_string();
    Ok((best, scores, work))
}

/// Stage 2 for one test query.
pub fn infer(
    weights: &ModelWeights,
    pool: &EncodedPool,
    task: &TaskSpec,
    cfg: &MethodConfig,
    query: &str,
) -> Result<Inference> {
    let mut metrics = QueryMetrics::default();
    let mut work = AttentionWork::default();
    let assembled;
    let dense;
    let empty;
    let (context, units): (&KvContext, Vec<Unit>) = match cfg.method {
        Method::Dbsa => {
            let t = Instant::now();
            let selection = select(pool.index(cfg.granularity), query, cfg.ratio)?;
            let selection = order(&selection, cfg.ordering);
            metrics.retrieval_seconds = t.elapsed().as_secs_f64();
            let t = Instant::now();
            assembled = assemble(&pool.cache, &selection.units())?;
            metrics.assembly_seconds = t.elapsed().as_secs_f64();
            (&assembled.context, selection.units())
        }
        Method::FixedIcl => (
            &pool.full_context,
            (0..pool.cache.n_blocks()).map(Unit::Block).collect(),
        ),
        Method::RetIcl => {
            let t = Instant::now();
            let units = select_plain(&pool.example_index, query, cfg.ratio)?;
            metrics.retrieval_seconds = t.elapsed().as_secs_f64();
            let t = Instant::now();
            let text: String = units
                .iter()
                .map(|u| match u {
                    Unit::Example(e) => task.template.render_demo(&task.pool[*e]),
                    Unit::Block(b) => pool.block_texts[*b].clone(),
                })
                .collect();
            let (ctx, encode_work) = encode_dense(weights, &text)?;
            work += encode_work;
            dense = ctx;
            metrics.reencode_seconds = t.elapsed().as_secs_f64();
            (&dense, units)
        }
        Method::ZeroShot => {
            empty = KvContext::empty(weights);
            (&empty, Vec::new())
        }
    };
    let t = Instant::now();
    let (label, scores, scoring_work) = score_labels(weights, task, context, query)?;
    metrics.scoring_seconds = t.elapsed().as_secs_f64();
    work += scoring_work;
    metrics.context_tokens = context.len();
    metrics.work = work;
    metrics.attention_flops = flops_attention(work, weights.config());
    Ok(Inference {
        label,
        scores,
        units,
        metrics,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    Pattern,
    Granularity,
    Grouping,
    Ordering,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 4] = [Self::Pattern, Self::Granularity, Self::Grouping, Self::Ordering];

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "pattern" => Ok(Self::Pattern),
            "granularity" => Ok(Self::Granularity),
            "grouping" => Ok(Self::Grouping),
            "ordering" => Ok(Self::Ordering),
            other => Err(Error::Invalid(format!("unknown ablation axis {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Pattern => "pattern",
            Self::Granularity => "granularity",
            Self::Grouping => "grouping",
            Self::Ordering => "ordering",
        }
    }

    /// Every setting compared along this axis.
    pub fn default_grid(&self, local_blocks: usize) -> Vec<AblationSetting> {
        match self {
            Self::Pattern => vec![
                AblationSetting::Pattern(AttentionPattern::Full),
                AblationSetting::Pattern(AttentionPattern::SinkPrevSelf { local_blocks }),
                AblationSetting::Pattern(AttentionPattern::SinkSelf),
                AblationSetting::Pattern(AttentionPattern::SelfOnly),
            ],
            Self::Granularity => vec![
                AblationSetting::Granularity(Granularity::Block),
                AblationSetting::Granularity(Granularity::Example),
            ],
            Self::Grouping => ["random", "clustered", "clustered-diverse"]
                .into_iter()
                .map(|g| AblationSetting::Grouping(g.to_string()))
                .collect(),
            Self::Ordering => OrderingStrategy::ALL
                .into_iter()
                .map(AblationSetting::Ordering)
                .collect(),
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationSetting {
    Pattern(AttentionPattern),
    Granularity(Granularity),
    /// Grouping name; the seed comes from the base config.
    Grouping(String),
    Ordering(OrderingStrategy),
}

impl AblationSetting {
    pub fn axis(&self) -> AblationAxis {
        match self {
            Self::Pattern(_) => AblationAxis::Pattern,
            Self::Granularity(_) => AblationAxis::Granularity,
            Self::Grouping(_) => AblationAxis::Grouping,
            Self::Ordering(_) => AblationAxis::Ordering,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Pattern(p) => p.to_string(),
            Self::Granularity(g) => g.to_string(),
            Self::Grouping(g) => g.clone(),
            Self::Ordering(o) => o.to_string(),
        }
    }
}

/// One configuration's outcome. Holds no wall-clock values, so rows are
/// reproducible given seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: AblationAxis,
    pub setting: String,
    /// `dbsa`, or `standard` for dense re-encoding of the same units.
    pub method: String,
    pub config_digest: String,
    pub accuracy: f64,
    pub n_queries: usize,
    pub mean_context_tokens: f64,
    pub mean_attended_pairs: f64,
    pub encode_attended_pairs: u64,
    pub block_sparsity: f64,
    pub token_sparsity: f64,
    pub predictions: Vec<String>,
    pub selections: Vec<Vec<Unit>>,
}

struct RowAcc {
    correct: usize,
    context: usize,
    pairs: u64,
    predictions: Vec<String>,
    selections: Vec<Vec<Unit>>,
}

impl RowAcc {
    fn new() -> Self {
        Self {
            correct: 0,
            context: 0,
            pairs: 0,
            predictions: Vec::new(),
            selections: Vec::new(),
        }
    }

    fn push(&mut self, gold: &str, inf: &Inference) {
        self.correct += usize::from(inf.label == gold);
        self.context += inf.metrics.context_tokens;
        self.pairs += inf.metrics.work.attended_pairs;
        self.predictions.push(inf.label.clone());
        self.selections.push(inf.units.clone());
    }

    fn finish(self, axis: AblationAxis, setting: String, method: &str, cfg: &MethodConfig, pool: &EncodedPool) -> Result<AblationRow> {
        let n = self.predictions.len().max(1) as f64;
        let tm = pool.token_mask()?;
        Ok(AblationRow {
            axis,
            setting,
            method: method.to_string(),
            config_digest: cfg.digest(),
            accuracy: self.correct as f64 / n,
            n_queries: self.predictions.len(),
            mean_context_tokens: self.context as f64 / n,
            mean_attended_pairs: self.pairs as f64 / n,
            encode_attended_pairs: pool.setup.encode_work.attended_pairs,
            block_sparsity: tm.block_mask().block_sparsity(),
            token_sparsity: token_sparsity(&tm),
            predictions: self.predictions,
            selections: self.selections,
        })
    }
}

/// Run one ablation axis over `grid`, all other settings taken from `base`.
///
/// Pattern rows let queries attend to the whole encoded pool, so only the
/// encoding pattern varies. Granularity rows come in pairs: DBSA and a dense
/// re-encoding of the same selected units.
pub fn run_ablation(
    weights: &ModelWeights,
    task: &TaskSpec,
    tests: &[Demonstration],
    base: &MethodConfig,
    axis: AblationAxis,
    grid: &[AblationSetting],
) -> Result<Vec<AblationRow>> {
    if grid.is_empty() {
        return Err(Error::Invalid("ablation grid is empty".into()));
    }
    if let Some(bad) = grid.iter().find(|s| s.axis() != axis) {
        return Err(Error::Invalid(format!(
            "setting {} does not belong to axis {axis}",
            bad.label()
        )));
    }
    let mut base = base.clone();
    base.method = Method::Dbsa;
    let mut rows = Vec::new();
    let shared = match axis {
        AblationAxis::Granularity | AblationAxis::Ordering => Some(encode_pool(weights, task, &base)?),
        _ => None,
    };
    for setting in grid {
        let mut cfg = base.clone();
        let owned;
        let pool = match setting {
            AblationSetting::Pattern(p) => {
                cfg.pattern = *p;
                cfg.ratio = 1.0;
                cfg.ordering = OrderingStrategy::InOrder;
                owned = encode_pool(weights, task, &cfg)?;
                &owned
            }
            AblationSetting::Grouping(name) => {
                cfg.grouping = GroupingStrategy::parse(name, base.seed)?;
                owned = encode_pool(weights, task, &cfg)?;
                &owned
            }
            AblationSetting::Granularity(g) => {
                cfg.granularity = *g;
                shared.as_ref().unwrap()
            }
            AblationSetting::Ordering(o) => {
                cfg.ordering = *o;
                shared.as_ref().unwrap()
            }
        };
        let mut acc = RowAcc::new();
        let mut dense_acc = RowAcc::new();
        for t in tests {
            let inf = infer(weights, pool, task, &cfg, &t.query)?;
            if axis == AblationAxis::Granularity {
                let text: String = inf
                    .units
                    .iter()
                    .map(|&u| {
                        let (b, offset, len) = pool.cache.locate(u)?;
                        Ok(pool.block_texts[b][offset..offset + len].to_string())
                    })
                    .collect::<Result<_>>()?;
                let (ctx, work) = encode_dense(weights, &text)?;
                let (label, scores, scoring) = score_labels(weights, task, &ctx, &t.query)?;
                let mut metrics = QueryMetrics {
                    context_tokens: ctx.len(),
                    work,
                    ..Default::default()
                };
                metrics.work += scoring;
                dense_acc.push(
                    &t.answer,
                    &Inference {
                        label,
                        scores,
                        units: inf.units.clone(),
                        metrics,
                    },
                );
            }
            acc.push(&t.answer, &inf);
        }
        rows.push(acc.finish(axis, setting.label(), "dbsa", &cfg, pool)?);
        if axis == AblationAxis::Granularity {
            rows.push(dense_acc.finish(axis, setting.label(), "standard", &cfg, pool)?);
        }
    }
    Ok(rows)
}
