use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use chrono::Utc;
use rayon::prelude::*;
use serde::Serialize;

use dbsa_core::dataset::{read_jsonl, read_labels, write_jsonl, write_labels, Demonstration};
use dbsa_core::kv_store::{bytes_digest, storage_bytes};
use dbsa_core::metrics::{mean, stdev, Metrics};
use dbsa_core::pipeline::{
    encode_pool, infer, render_block, run_ablation, AblationAxis, EncodedPool, Inference, Method, MethodConfig,
    TaskSpec, CACHE_FILE, INDEX_FILE, POOL_FILE,
};
use dbsa_core::retrieval::GroupingStrategy;
use dbsa_core::sparse_mask::token_sparsity;
use dbsa_core::synthetic::{associative_recall, SyntheticSpec};
use dbsa_core::{ModelConfig, ModelWeights};

use crate::cli::*;
use crate::report::*;
use crate::{worker_count, CliError};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
struct Manifest {
    command: String,
    started_at: String,
    finished_at: String,
    workers: usize,
    config: serde_json::Value,
    seeds: Vec<u64>,
    digests: BTreeMap<String, String>,
    outputs: Vec<String>,
}

struct Loaded {
    weights: ModelWeights,
    task: TaskSpec,
    digests: BTreeMap<String, String>,
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(bytes_digest(&bytes)))
}

fn load(data: &DataArgs) -> Result<Loaded> {
    let weights = ModelWeights::load(&data.model).with_context(|| format!("loading model {}", data.model.display()))?;
    let pool = read_jsonl(&data.pool)?;
    let labels = read_labels(&data.labels)?;
    let task = TaskSpec::new(pool, labels)?;
    let mut digests = BTreeMap::new();
    digests.insert("model_checksum".into(), hex::encode(weights.checksum()));
    digests.insert("model_config".into(), weights.config_hash().to_string());
    digests.insert("pool".into(), file_digest(&data.pool)?);
    digests.insert("labels".into(), file_digest(&data.labels)?);
    Ok(Loaded { weights, task, digests })
}

fn thread_pool() -> Result<(rayon::ThreadPool, usize)> {
    let n = worker_count()?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build()?;
    Ok((pool, n))
}

fn now() -> String {
    Utc::now().to_rfc3339()
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    let items: Vec<T> = s
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|_| CliError::Usage(format!("invalid {what} {p:?}"))))
        .collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err(CliError::Usage(format!("no {what} given")).into());
    }
    Ok(items)
}

/// Digest of a config with its seeds cleared, shared by all runs of a bench.
fn seedless_digest(cfg: &MethodConfig) -> Result<String> {
    let mut c = cfg.clone();
    c.seed = 0;
    c.grouping = GroupingStrategy::parse(cfg.grouping.name(), 0)?;
    Ok(c.digest())
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::InitModel(a) => init_model(&a, out),
        Command::Synth(a) => synth(&a, out),
        Command::Encode(a) => encode(&a, out),
        Command::Infer(a) => infer_one(&a, out),
        Command::Bench(a) => bench(&a, out),
        Command::Ablate(a) => ablate(&a, out),
        Command::Storage(a) => storage(&a, out),
        Command::Amortize(a) => amortize(&a, out),
    }
}

fn init_model(a: &InitModelArgs, out: &mut dyn Write) -> Result<()> {
    let config: ModelConfig = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).map_err(dbsa_core::Error::from)?
        }
        None => ModelConfig::tiny(),
    };
    let weights = ModelWeights::init_random(&config, a.seed)?;
    weights.save(&a.out)?;
    writeln!(out, "wrote {} (config {}, checksum {})", a.out.display(), weights.config_hash(), hex::encode(weights.checksum()))?;
    Ok(())
}

fn synth(a: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let task = associative_recall(SyntheticSpec {
        pool_size: a.pool_size,
        test_size: a.test_size,
        n_labels: a.n_labels,
        n_keys: a.n_keys,
        filler_words: a.filler_words,
        seed: a.seed,
    });
    std::fs::create_dir_all(&a.out)?;
    write_jsonl(&a.out.join("pool.jsonl"), &task.pool)?;
    write_jsonl(&a.out.join("test.jsonl"), &task.tests)?;
    write_labels(&a.out.join("labels.txt"), &task.labels)?;
    writeln!(out, "wrote {} pool, {} test examples, {} labels to {}", task.pool.len(), task.tests.len(), task.labels.len(), a.out.display())?;
    Ok(())
}

fn encode(a: &EncodeArgs, out: &mut dyn Write) -> Result<()> {
    let started_at = now();
    let loaded = load(&a.data)?;
    let cfg = a.method.config(Method::Dbsa, a.method.seed)?;
    let pool = encode_pool(&loaded.weights, &loaded.task, &cfg)?;
    pool.save(&a.out)?;
    let sparsity = token_sparsity(&pool.token_mask()?);
    writeln!(
        out,
        "encoded {} blocks, {} tokens in {:.3}s; pattern {}, token sparsity {:.4}, cache {} bytes",
        pool.setup.n_blocks, pool.setup.n_tokens, pool.setup.encode_seconds, pool.pattern, sparsity, pool.setup.cache_bytes
    )?;
    write_json(
        &a.out.join(MANIFEST_FILE),
        &Manifest {
            command: "encode".into(),
            started_at,
            finished_at: now(),
            workers: 1,
            config: serde_json::to_value(&cfg)?,
            seeds: vec![cfg.seed],
            digests: loaded.digests,
            outputs: vec![CACHE_FILE.into(), INDEX_FILE.into(), POOL_FILE.into()],
        },
    )
}

fn check_pool_matches(pool: &EncodedPool, task: &TaskSpec) -> Result<()> {
    if pool.partition.n_examples() != task.pool.len() || !pool.partition.is_partition_of(task.pool.len()) {
        return Err(CliError::Usage("cache was encoded from a different pool".into()).into());
    }
    for (b, members) in pool.partition.blocks.iter().enumerate() {
        if render_block(&task.template, &task.pool, members).0 != pool.block_texts[b] {
            return Err(CliError::Usage(format!("cache block {b} does not match the pool file")).into());
        }
    }
    Ok(())
}

fn infer_one(a: &InferArgs, out: &mut dyn Write) -> Result<()> {
    let loaded = load(&a.data)?;
    let method = Method::parse(&a.method_name)?;
    let cfg = a.method.config(method, a.method.seed)?;
    let pool = EncodedPool::load(&a.cache, &loaded.weights)?;
    check_pool_matches(&pool, &loaded.task)?;
    let inf = infer(&loaded.weights, &pool, &loaded.task, &cfg, &a.query)?;
    let json = serde_json::to_string_pretty(&inf)?;
    writeln!(out, "{json}")?;
    if let Some(p) = &a.out {
        write_json(p, &inf)?;
    }
    Ok(())
}

/// Per-query results for one method over the test set, in test order.
fn run_queries(
    workers: &rayon::ThreadPool,
    loaded: &Loaded,
    pool: &EncodedPool,
    cfg: &MethodConfig,
    tests: &[Demonstration],
) -> Result<Vec<Inference>> {
    Ok(workers.install(|| {
        tests
            .par_iter()
            .map(|t| infer(&loaded.weights, pool, &loaded.task, cfg, &t.query))
            .collect::<dbsa_core::Result<Vec<_>>>()
    })?)
}

fn bench(a: &BenchArgs, out: &mut dyn Write) -> Result<()> {
    let started_at = now();
    let mut loaded = load(&a.data)?;
    let tests = read_jsonl(&a.test)?;
    for t in &tests {
        if !loaded.task.labels.contains(&t.answer) {
            return Err(CliError::Usage(format!("test answer {:?} is not in the label set", t.answer)).into());
        }
    }
    loaded.digests.insert("test".into(), file_digest(&a.test)?);
    let methods: Vec<Method> = a
        .methods
        .split(',')
        .map(|m| Method::parse(m.trim()))
        .collect::<dbsa_core::Result<_>>()?;
    if methods.is_empty() || a.runs == 0 {
        bail!(CliError::Usage("need at least one method and one run".into()));
    }
    let dataset = a.dataset.clone().unwrap_or_else(|| {
        a.data.pool.file_stem().map_or("dataset".into(), |s| s.to_string_lossy().into_owned())
    });
    let (workers, n_workers) = thread_pool()?;

    let mut rows = Vec::new();
    let mut timings = Vec::new();
    let mut seeds = Vec::new();
    for run in 0..a.runs {
        let seed = a.method.seed + run as u64;
        seeds.push(seed);
        let base = a.method.config(Method::Dbsa, seed)?;
        // Setup is timed single-threaded.
        let pool = encode_pool(&loaded.weights, &loaded.task, &base)?;
        for &method in &methods {
            let cfg = MethodConfig { method, ..base.clone() };
            let results = run_queries(&workers, &loaded, &pool, &cfg, &tests)?;
            let mut ledger = Metrics {
                setup_seconds: pool.setup_seconds(method),
                cache_bytes: match method {
                    Method::Dbsa | Method::FixedIcl => pool.setup.cache_bytes,
                    Method::RetIcl | Method::ZeroShot => 0,
                },
                ..Metrics::default()
            };
            for r in &results {
                ledger.push(&r.metrics);
            }
            let n = results.len().max(1) as f64;
            let correct = results.iter().zip(&tests).filter(|(r, t)| r.label == t.answer).count();
            let component = |f: fn(&Inference) -> f64| mean(&results.iter().map(f).collect::<Vec<_>>());
            rows.push(ReportRow {
                method: method.name().into(),
                dataset: dataset.clone(),
                run,
                seed,
                config_digest: seedless_digest(&cfg)?,
                accuracy: correct as f64 / n,
                n_queries: results.len(),
                mean_context_tokens: results.iter().map(|r| r.metrics.context_tokens as f64).sum::<f64>() / n,
                mean_attended_pairs: ledger.attended_tokens.iter().sum::<u64>() as f64 / n,
                mean_attention_flops: ledger.attention_flops.iter().sum::<u64>() as f64 / n,
                cache_bytes: ledger.cache_bytes,
            });
            timings.push(TimingRow {
                method: method.name().into(),
                run,
                seed,
                setup_seconds: ledger.setup_seconds,
                n_requests: ledger.n_requests,
                mean_query_seconds: ledger.mean_query_seconds(),
                stdev_query_seconds: stdev(&ledger.per_query_seconds),
                mean_retrieval_seconds: component(|r| r.metrics.retrieval_seconds),
                mean_assembly_seconds: component(|r| r.metrics.assembly_seconds),
                mean_reencode_seconds: component(|r| r.metrics.reencode_seconds),
                mean_scoring_seconds: component(|r| r.metrics.scoring_seconds),
            });
        }
    }

    let summary: Vec<SummaryRow> = methods
        .iter()
        .map(|m| {
            let mine: Vec<&ReportRow> = rows.iter().filter(|r| r.method == m.name()).collect();
            let acc: Vec<f64> = mine.iter().map(|r| r.accuracy).collect();
            let pairs: Vec<f64> = mine.iter().map(|r| r.mean_attended_pairs).collect();
            SummaryRow {
                method: m.name().into(),
                dataset: dataset.clone(),
                config_digest: mine[0].config_digest.clone(),
                runs: mine.len(),
                accuracy_mean: mean(&acc),
                accuracy_stdev: stdev(&acc),
                attended_pairs_mean: mean(&pairs),
                attended_pairs_stdev: stdev(&pairs),
                attention_flops_mean: mean(&mine.iter().map(|r| r.mean_attention_flops).collect::<Vec<_>>()),
                context_tokens_mean: mean(&mine.iter().map(|r| r.mean_context_tokens).collect::<Vec<_>>()),
            }
        })
        .collect();

    write_table(&a.out, "report", &rows)?;
    write_table(&a.out, "summary", &summary)?;
    write_table(&a.out, "timings", &timings)?;
    writeln!(out, "{:<10} {:>5} {:>9} {:>9} {:>14} {:>12}", "method", "runs", "acc", "acc_sd", "attended", "query_s")?;
    for s in &summary {
        let q: Vec<f64> = timings.iter().filter(|t| t.method == s.method).map(|t| t.mean_query_seconds).collect();
        writeln!(
            out,
            "{:<10} {:>5} {:>9.4} {:>9.4} {:>14.1} {:>12.6}",
            s.method, s.runs, s.accuracy_mean, s.accuracy_stdev, s.attended_pairs_mean, mean(&q)
        )?;
    }
    write_json(
        &a.out.join(MANIFEST_FILE),
        &Manifest {
            command: "bench".into(),
            started_at,
            finished_at: now(),
            workers: n_workers,
            config: serde_json::json!({
                "base": a.method.config(Method::Dbsa, a.method.seed)?,
                "methods": methods,
                "runs": a.runs,
                "dataset": dataset,
            }),
            seeds,
            digests: loaded.digests,
            outputs: ["report", "summary", "timings"]
                .iter()
                .flat_map(|s| [format!("{s}.csv"), format!("{s}.json")])
                .collect(),
        },
    )
}

#[derive(Serialize)]
struct AblationDetail {
    axis: String,
    setting: String,
    method: String,
    predictions: Vec<String>,
    selections: Vec<Vec<dbsa_core::kv_store::Unit>>,
}

fn ablate(a: &AblateArgs, out: &mut dyn Write) -> Result<()> {
    let started_at = now();
    let mut loaded = load(&a.data)?;
    let tests = read_jsonl(&a.test)?;
    loaded.digests.insert("test".into(), file_digest(&a.test)?);
    let axes: Vec<AblationAxis> = if a.axis == "all" {
        AblationAxis::ALL.to_vec()
    } else {
        vec![AblationAxis::parse(&a.axis)?]
    };
    let base = a.method.config(Method::Dbsa, a.method.seed)?;
    let mut rows = Vec::new();
    let mut details = Vec::new();
    for axis in axes.iter().copied() {
        let grid = axis.default_grid(a.method.local_blocks);
        for r in run_ablation(&loaded.weights, &loaded.task, &tests, &base, axis, &grid)? {
            writeln!(
                out,
                "{:<12} {:<22} {:<9} acc {:.4}  ctx {:>9.1}  sparsity {:.4}",
                r.axis.name(),
                r.setting,
                r.method,
                r.accuracy,
                r.mean_context_tokens,
                r.token_sparsity
            )?;
            rows.push(AblationCsvRow {
                axis: r.axis.name().into(),
                setting: r.setting.clone(),
                method: r.method.clone(),
                config_digest: r.config_digest.clone(),
                accuracy: r.accuracy,
                n_queries: r.n_queries,
                mean_context_tokens: r.mean_context_tokens,
                mean_attended_pairs: r.mean_attended_pairs,
                encode_attended_pairs: r.encode_attended_pairs,
                block_sparsity: r.block_sparsity,
                token_sparsity: r.token_sparsity,
            });
            details.push(AblationDetail {
                axis: r.axis.name().into(),
                setting: r.setting,
                method: r.method,
                predictions: r.predictions,
                selections: r.selections,
            });
        }
    }
    write_table(&a.out, "ablation", &rows)?;
    write_json(&a.out.join("ablation_detail.json"), &details)?;
    write_json(
        &a.out.join(MANIFEST_FILE),
        &Manifest {
            command: "ablate".into(),
            started_at,
            finished_at: now(),
            workers: 1,
            config: serde_json::json!({ "base": base, "axes": axes }),
            seeds: vec![base.seed],
            digests: loaded.digests,
            outputs: vec!["ablation.csv".into(), "ablation.json".into(), "ablation_detail.json".into()],
        },
    )
}

const MIB: f64 = (1u64 << 20) as f64;
const GIB: f64 = (1u64 << 30) as f64;

pub fn storage_rows(config: &ModelConfig, bytes_per_value: u64, tokens: &[u64]) -> dbsa_core::Result<Vec<StorageRow>> {
    let per_token = storage_bytes(config, 1, bytes_per_value)?;
    tokens
        .iter()
        .map(|&t| {
            let total = storage_bytes(config, t, bytes_per_value)?;
            Ok(StorageRow {
                tokens: t,
                bytes_per_token: per_token,
                total_bytes: total,
                mib: total as f64 / MIB,
                gib: total as f64 / GIB,
                gb: total as f64 / 1e9,
            })
        })
        .collect()
}

fn storage(a: &StorageArgs, out: &mut dyn Write) -> Result<()> {
    let config = match &a.model {
        Some(p) => ModelWeights::load(p)?.config().clone(),
        None => ModelConfig {
            n_layers: a.layers,
            n_heads: a.kv_heads,
            n_kv_heads: a.kv_heads,
            head_dim: a.head_dim,
            d_model: a.kv_heads * a.head_dim,
            ..ModelConfig::tiny()
        },
    };
    let tokens: Vec<u64> = parse_list(&a.tokens, "token count")?;
    let rows = storage_rows(&config, a.bytes_per_value, &tokens)?;
    let per_token = rows[0].bytes_per_token;
    writeln!(
        out,
        "KV cache: {} layers x {} KV heads x head_dim {} x {} B (keys + values)",
        config.n_layers, config.n_kv_heads, config.head_dim, a.bytes_per_value
    )?;
    writeln!(out, "per token: {per_token} bytes = {} MiB", per_token as f64 / MIB)?;
    writeln!(out, "{:>10} {:>16} {:>14} {:>10} {:>10}", "tokens", "bytes", "MiB", "GiB", "GB")?;
    for r in &rows {
        writeln!(out, "{:>10} {:>16} {:>14.3} {:>10.3} {:>10.3}", r.tokens, r.total_bytes, r.mib, r.gib, r.gb)?;
    }
    if let Some(dir) = &a.out {
        write_table(dir, "storage", &rows)?;
    }
    Ok(())
}

/// Cost-per-request curve points, averaging setup and per-query time over
/// runs of each method.
pub fn amortize_rows(timings: &[TimingRow], requests: &[u64]) -> Vec<AmortizeRow> {
    let mut methods: Vec<&str> = Vec::new();
    for t in timings {
        if !methods.contains(&t.method.as_str()) {
            methods.push(&t.method);
        }
    }
    let mut rows = Vec::new();
    for m in methods {
        let mine: Vec<&TimingRow> = timings.iter().filter(|t| t.method == m).collect();
        let setup = mean(&mine.iter().map(|t| t.setup_seconds).collect::<Vec<_>>());
        let query = mean(&mine.iter().map(|t| t.mean_query_seconds).collect::<Vec<_>>());
        for &n in requests {
            rows.push(AmortizeRow {
                method: m.to_string(),
                requests: n,
                setup_seconds: setup,
                mean_query_seconds: query,
                amortized_seconds: dbsa_core::metrics::amortized_cost(setup, query, n),
            });
        }
    }
    rows
}

fn amortize(a: &AmortizeArgs, out: &mut dyn Write) -> Result<()> {
    let text = std::fs::read_to_string(&a.report).with_context(|| format!("reading {}", a.report.display()))?;
    let timings: Vec<TimingRow> = serde_json::from_str(&text).map_err(dbsa_core::Error::from)?;
    if timings.is_empty() {
        bail!(CliError::Usage("timings report has no rows".into()));
    }
    let mut requests: Vec<u64> = parse_list(&a.requests, "request count")?;
    if requests.contains(&0) {
        bail!(CliError::Usage("request counts must be positive".into()));
    }
    requests.sort_unstable();
    requests.dedup();
    let rows = amortize_rows(&timings, &requests);
    writeln!(out, "{:<10} {:>10} {:>14}", "method", "requests", "seconds/req")?;
    for r in &rows {
        writeln!(out, "{:<10} {:>10} {:>14.6}", r.method, r.requests, r.amortized_seconds)?;
    }
    if let Some(dir) = &a.out {
        write_table(dir, "amortize", &rows)?;
    }
    Ok(())
}
