//! Reference implementations for differential tests.
//!
//! Nothing here calls into the subject's kernels: the forward passes read raw
//! weight tensors and recompute every step in f64 with plain loops, BM25 is a
//! straight transcription of the formula, and masks are enumerated from the
//! pattern definitions. Only data types are shared with `dbsa-core`.

use dbsa_core::sparse_mask::AttentionPattern;
use dbsa_core::ModelWeights;

pub mod fixtures;

/// An oracle value and how far the subject strayed from it.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult<T> {
    pub value: T,
    pub max_abs_dev: f64,
}

pub fn max_abs_dev(subject: &[f32], oracle: &[f64]) -> f64 {
    assert_eq!(subject.len(), oracle.len(), "length mismatch");
    subject
        .iter()
        .zip(oracle)
        .map(|(&s, &o)| (s as f64 - o).abs())
        .fold(0.0, f64::max)
}

/// Compare a flattened subject tensor with oracle rows.
pub fn compare_rows(subject: &[f32], oracle: Vec<Vec<f64>>) -> OracleResult<Vec<Vec<f64>>> {
    let flat: Vec<f64> = oracle.iter().flatten().copied().collect();
    let dev = max_abs_dev(subject, &flat);
    OracleResult {
        value: oracle,
        max_abs_dev: dev,
    }
}

// ---------------------------------------------------------------------------
// masks

/// Block-level rule written out from the pattern definitions.
pub fn block_allowed(pattern: AttentionPattern, row: usize, col: usize) -> bool {
    if col > row {
        return false;
    }
    let is_self = col == row;
    let is_anchor = col == 0;
    match pattern {
        AttentionPattern::Full => true,
        AttentionPattern::SelfOnly => is_self,
        AttentionPattern::SinkSelf => is_self || is_anchor,
        AttentionPattern::SinkPrevSelf { local_blocks } => {
            let lo = row.saturating_sub(local_blocks);
            is_self || is_anchor || (lo..row).contains(&col)
        }
    }
}

/// Exhaustive count of allowed block pairs.
pub fn enumerate_block_pairs(n_blocks: usize, pattern: AttentionPattern) -> u64 {
    let mut n = 0;
    for r in 0..n_blocks {
        for c in 0..n_blocks {
            if block_allowed(pattern, r, c) {
                n += 1;
            }
        }
    }
    n
}

fn block_ids(block_lens: &[usize]) -> Vec<usize> {
    block_lens
        .iter()
        .enumerate()
        .flat_map(|(b, &l)| std::iter::repeat(b).take(l))
        .collect()
}

/// Token-level predicate over the pool: within a block causal, across blocks
/// by the block rule.
pub fn token_allowed(pattern: AttentionPattern, blocks: &[usize], q: usize, k: usize) -> bool {
    k <= q && (blocks[q] == blocks[k] || block_allowed(pattern, blocks[q], blocks[k]))
}

/// Exhaustive count of allowed token pairs (quadratic in total tokens).
pub fn enumerate_token_pairs(block_lens: &[usize], pattern: AttentionPattern) -> u64 {
    let blocks = block_ids(block_lens);
    let t = blocks.len();
    let mut n = 0;
    for q in 0..t {
        for k in 0..=q {
            if token_allowed(pattern, &blocks, q, k) {
                n += 1;
            }
        }
    }
    n
}

/// Dense mask for a pool under `pattern` followed by `query_len` query
/// tokens that see the whole pool and each other causally.
pub fn stage_mask(block_lens: &[usize], pattern: AttentionPattern, query_len: usize) -> Vec<Vec<bool>> {
    let blocks = block_ids(block_lens);
    let pool = blocks.len();
    let t = pool + query_len;
    (0..t)
        .map(|q| {
            (0..t)
                .map(|k| {
                    if q < pool {
                        k < pool && token_allowed(pattern, &blocks, q, k)
                    } else {
                        k <= q
                    }
                })
                .collect()
        })
        .collect()
}

pub fn causal_mask(t: usize) -> Vec<Vec<bool>> {
    (0..t).map(|q| (0..t).map(|k| k <= q).collect()).collect()
}

// ---------------------------------------------------------------------------
// dense kernels in f64

pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

struct Params<'a> {
    w: &'a ModelWeights,
}

impl Params<'_> {
    fn t(&self, name: &str) -> Vec<f64> {
        self.w.tensors()[name].data().iter().map(|&v| v as f64).collect()
    }

    fn l(&self, layer: usize, part: &str) -> Vec<f64> {
        self.t(&format!("layers.{layer}.{part}"))
    }
}

fn rmsnorm_rows(x: &[f64], w: &[f64], d: usize, eps: f64) -> Vec<f64> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(d) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        for (v, g) in row.iter_mut().zip(w) {
            *v *= inv * g;
        }
    }
    out
}

/// Rotate a head vector; pairs are `(x[i], x[i + hd/2])`, angle
/// `pos / theta^(2i/hd)`.
pub fn rope_reference(x: &[f64], pos: usize, theta: f64) -> Vec<f64> {
    let hd = x.len();
    let half = hd / 2;
    let mut out = x.to_vec();
    for i in 0..half {
        let freq = theta.powf(-(2.0 * i as f64) / hd as f64);
        let a = pos as f64 * freq;
        out[i] = x[i] * a.cos() - x[i + half] * a.sin();
        out[i + half] = x[i] * a.sin() + x[i + half] * a.cos();
    }
    out
}

/// Per-layer projections for every token, returning (q rotated, k rotated, v)
/// with heads laid out contiguously per token.
struct Projected {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
}

fn project(p: &Params, x: &[f64], layer: usize, positions: &[usize]) -> Projected {
    let c = p.w.config();
    let (d, hd, t) = (c.d_model, c.head_dim, positions.len());
    let qw = c.n_heads * hd;
    let kw = c.n_kv_heads * hd;
    let h = rmsnorm_rows(x, &p.l(layer, "attn_norm"), d, c.norm_eps as f64);
    let mut q = naive_matmul(&h, &p.l(layer, "wq"), t, d, qw);
    let mut k = naive_matmul(&h, &p.l(layer, "wk"), t, d, kw);
    let v = naive_matmul(&h, &p.l(layer, "wv"), t, d, kw);
    let theta = c.rope_theta as f64;
    for (i, &pos) in positions.iter().enumerate() {
        for head in 0..c.n_heads {
            let s = i * qw + head * hd;
            let r = rope_reference(&q[s..s + hd], pos, theta);
            q[s..s + hd].copy_from_slice(&r);
        }
        for head in 0..c.n_kv_heads {
            let s = i * kw + head * hd;
            let r = rope_reference(&k[s..s + hd], pos, theta);
            k[s..s + hd].copy_from_slice(&r);
        }
    }
    Projected { q, k, v }
}

fn finish_layer(p: &Params, x: &mut [f64], attn: &[f64], layer: usize, t: usize) {
    let c = p.w.config();
    let d = c.d_model;
    let qw = c.n_heads * c.head_dim;
    let o = naive_matmul(attn, &p.l(layer, "wo"), t, qw, d);
    for (a, b) in x.iter_mut().zip(&o) {
        *a += b;
    }
    let h = rmsnorm_rows(x, &p.l(layer, "ffn_norm"), d, c.norm_eps as f64);
    let f = c.ffn_dim;
    let g = naive_matmul(&h, &p.l(layer, "w_gate"), t, d, f);
    let u = naive_matmul(&h, &p.l(layer, "w_up"), t, d, f);
    let act: Vec<f64> = g
        .iter()
        .zip(&u)
        .map(|(&g, &u)| g / (1.0 + (-g).exp()) * u)
        .collect();
    let down = naive_matmul(&act, &p.l(layer, "w_down"), t, f, d);
    for (a, b) in x.iter_mut().zip(&down) {
        *a += b;
    }
}

fn embed(p: &Params, tokens: &[u32]) -> Vec<f64> {
    let c = p.w.config();
    let e = p.t("embed");
    tokens
        .iter()
        .flat_map(|&id| e[id as usize * c.d_model..(id as usize + 1) * c.d_model].to_vec())
        .collect()
}

fn logits_from(p: &Params, x: &[f64], t: usize) -> Vec<Vec<f64>> {
    let c = p.w.config();
    let d = c.d_model;
    let h = rmsnorm_rows(x, &p.t("final_norm"), d, c.norm_eps as f64);
    let out = if c.tied_lm_head {
        let e = p.t("embed");
        let mut o = vec![0.0; t * c.vocab_size];
        for r in 0..t {
            for v in 0..c.vocab_size {
                o[r * c.vocab_size + v] = (0..d).map(|i| h[r * d + i] * e[v * d + i]).sum();
            }
        }
        o
    } else {
        naive_matmul(&h, &p.t("lm_head"), t, d, c.vocab_size)
    };
    out.chunks(c.vocab_size).map(<[f64]>::to_vec).collect()
}

/// Full-materialisation masked forward: builds every head's `T × T` score
/// matrix, masks it, softmaxes rows and multiplies by V. No caching, no
/// segmentation. `mask[q][k]` = query `q` may attend to key `k`.
pub fn naive_masked_forward(
    weights: &ModelWeights,
    tokens: &[u32],
    positions: &[usize],
    mask: &[Vec<bool>],
) -> Vec<Vec<f64>> {
    let p = Params { w: weights };
    let c = weights.config();
    let t = tokens.len();
    let hd = c.head_dim;
    let qw = c.n_heads * hd;
    let kw = c.n_kv_heads * hd;
    let group = c.n_heads / c.n_kv_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut x = embed(&p, tokens);
    for layer in 0..c.n_layers {
        let pr = project(&p, &x, layer, positions);
        let mut attn = vec![0.0; t * qw];
        for head in 0..c.n_heads {
            let g = head / group;
            let mut scores = vec![vec![f64::NEG_INFINITY; t]; t];
            for qi in 0..t {
                for ki in 0..t {
                    if mask[qi][ki] {
                        scores[qi][ki] = (0..hd)
                            .map(|e| pr.q[qi * qw + head * hd + e] * pr.k[ki * kw + g * hd + e])
                            .sum::<f64>()
                            * scale;
                    }
                }
            }
            for (qi, row) in scores.iter().enumerate() {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert!(m > f64::NEG_INFINITY, "row {qi} fully masked");
                let w: Vec<f64> = row.iter().map(|&s| (s - m).exp()).collect();
                let z: f64 = w.iter().sum();
                for e in 0..hd {
                    attn[qi * qw + head * hd + e] =
                        (0..t).map(|ki| w[ki] / z * pr.v[ki * kw + g * hd + e]).sum();
                }
            }
        }
        finish_layer(&p, &mut x, &attn, layer, t);
    }
    logits_from(&p, &x, t)
}

/// Second independent route: token-at-a-time attention with a running
/// (online) softmax, never materialising a score row.
pub fn scalar_loop_forward(
    weights: &ModelWeights,
    tokens: &[u32],
    positions: &[usize],
    mask: &[Vec<bool>],
) -> Vec<Vec<f64>> {
    let p = Params { w: weights };
    let c = weights.config();
    let t = tokens.len();
    let hd = c.head_dim;
    let qw = c.n_heads * hd;
    let kw = c.n_kv_heads * hd;
    let group = c.n_heads / c.n_kv_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut x = embed(&p, tokens);
    for layer in 0..c.n_layers {
        let pr = project(&p, &x, layer, positions);
        let mut attn = vec![0.0; t * qw];
        for qi in 0..t {
            for head in 0..c.n_heads {
                let g = head / group;
                let mut running_max = f64::NEG_INFINITY;
                let mut denom = 0.0;
                let mut acc = vec![0.0; hd];
                for ki in (0..t).filter(|&k| mask[qi][k]) {
                    let mut s = 0.0;
                    for e in 0..hd {
                        s += pr.q[qi * qw + head * hd + e] * pr.k[ki * kw + g * hd + e];
                    }
                    s *= scale;
                    let new_max = running_max.max(s);
                    let correction = (running_max - new_max).exp();
                    let w = (s - new_max).exp();
                    denom = denom * correction + w;
                    for e in 0..hd {
                        acc[e] = acc[e] * correction + w * pr.v[ki * kw + g * hd + e];
                    }
                    running_max = new_max;
                }
                for e in 0..hd {
                    attn[qi * qw + head * hd + e] = acc[e] / denom;
                }
            }
        }
        finish_layer(&p, &mut x, &attn, layer, t);
    }
    logits_from(&p, &x, t)
}

/// Pre-rotation keys of every layer from a naive masked pass, `[layer][token]`
/// each of width `n_kv_heads * head_dim`.
pub fn naive_pre_rotation_keys(
    weights: &ModelWeights,
    tokens: &[u32],
    positions: &[usize],
    mask: &[Vec<bool>],
) -> Vec<Vec<Vec<f64>>> {
    let p = Params { w: weights };
    let c = weights.config();
    let t = tokens.len();
    let hd = c.head_dim;
    let qw = c.n_heads * hd;
    let kw = c.n_kv_heads * hd;
    let group = c.n_heads / c.n_kv_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut x = embed(&p, tokens);
    let mut out = Vec::new();
    for layer in 0..c.n_layers {
        let h = rmsnorm_rows(&x, &p.l(layer, "attn_norm"), c.d_model, c.norm_eps as f64);
        let k_pre = naive_matmul(&h, &p.l(layer, "wk"), t, c.d_model, kw);
        out.push(k_pre.chunks(kw).map(<[f64]>::to_vec).collect());
        let pr = project(&p, &x, layer, positions);
        let mut attn = vec![0.0; t * qw];
        for qi in 0..t {
            for head in 0..c.n_heads {
                let g = head / group;
                let s: Vec<(usize, f64)> = (0..t)
                    .filter(|&k| mask[qi][k])
                    .map(|k| {
                        let d: f64 = (0..hd)
                            .map(|e| pr.q[qi * qw + head * hd + e] * pr.k[k * kw + g * hd + e])
                            .sum();
                        (k, d * scale)
                    })
                    .collect();
                let m = s.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|x| (x.1 - m).exp()).sum();
                for e in 0..hd {
                    attn[qi * qw + head * hd + e] = s
                        .iter()
                        .map(|&(k, sc)| (sc - m).exp() / z * pr.v[k * kw + g * hd + e])
                        .sum();
                }
            }
        }
        finish_layer(&p, &mut x, &attn, layer, t);
    }
    out
}

/// Sum of `log softmax` of each label token under teacher forcing, from the
/// naive forward over `context ++ query ++ label[..n-1]` with `mask`
/// covering that whole sequence.
pub fn label_logprob_reference(logits: &[Vec<f64>], first_row: usize, label: &[u32]) -> f64 {
    label
        .iter()
        .enumerate()
        .map(|(s, &tok)| {
            let row = &logits[first_row + s];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            row[tok as usize] - m - z.ln()
        })
        .sum()
}

/// Logits for the query rows of `blocks ++ query`, where the blocks are
/// encoded under `pattern` and the query sees every block plus itself
/// causally. Text is tokenized as raw bytes.
pub fn pool_query_logits(
    weights: &ModelWeights,
    blocks: &[String],
    pattern: AttentionPattern,
    query: &[u32],
) -> Vec<Vec<f64>> {
    let lens: Vec<usize> = blocks.iter().map(String::len).collect();
    let mut tokens: Vec<u32> = blocks.iter().flat_map(|b| b.bytes().map(u32::from)).collect();
    let pool = tokens.len();
    tokens.extend_from_slice(query);
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let mask = stage_mask(&lens, pattern, query.len());
    naive_masked_forward(weights, &tokens, &positions, &mask).split_off(pool)
}

// ---------------------------------------------------------------------------
// BM25

fn terms(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Direct Robertson–Zaragoza BM25 of `corpus[doc]` for `query`:
/// `Σ idf(t) · tf·(k1+1) / (tf + k1·(1 − b + b·dl/avgdl))`,
/// `idf(t) = ln(1 + (N − df + 0.5)/(df + 0.5))`.
pub fn bm25_reference(corpus: &[&str], query: &str, k1: f64, b: f64, doc: usize) -> f64 {
    let docs: Vec<Vec<String>> = corpus.iter().map(|d| terms(d)).collect();
    let n = docs.len() as f64;
    let avgdl = docs.iter().map(|d| d.len() as f64).sum::<f64>() / n;
    let dl = docs[doc].len() as f64;
    let mut total = 0.0;
    for q in terms(query) {
        let tf = docs[doc].iter().filter(|t| **t == q).count() as f64;
        if tf == 0.0 {
            continue;
        }
        let df = docs.iter().filter(|d| d.contains(&q)).count() as f64;
        let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
        total += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / avgdl));
    }
    total
}
