//! Forward passes with an explicit token mask and externally supplied,
//! already-rotated key/value context.

use super::config::ConfigHash;
use super::rope::rotate_rows;
use super::weights::ModelWeights;
use crate::error::{Error, Result};
use crate::tensor::{self, matmul, rms_norm, swiglu, BoolMatrix, Tensor};

/// Token ids with their absolute positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
    positions: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, positions: Vec<usize>) -> Result<Self> {
        if ids.len() != positions.len() {
            return Err(Error::Position(format!(
                "{} ids but {} positions",
                ids.len(),
                positions.len()
            )));
        }
        if positions.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Position("positions must be strictly increasing".into()));
        }
        Ok(Self { ids, positions })
    }

    /// Positions `start, start + 1, ...`.
    pub fn contiguous(ids: Vec<u32>, start: usize) -> Self {
        let positions = (start..start + ids.len()).collect();
        Self { ids, positions }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn check(&self, weights: &ModelWeights) -> Result<()> {
        let c = weights.config();
        if let Some(&bad) = self.ids.iter().find(|&&t| t as usize >= c.vocab_size) {
            return Err(Error::OutOfVocab {
                token: bad,
                vocab_size: c.vocab_size,
            });
        }
        if let Some(&last) = self.positions.last() {
            if last >= c.max_seq_len {
                return Err(Error::Position(format!(
                    "position {last} exceeds max_seq_len {}",
                    c.max_seq_len
                )));
            }
        }
        Ok(())
    }
}

/// Keys and values of one layer, `[tokens, n_kv_heads, head_dim]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKv {
    pub keys: Tensor,
    pub values: Tensor,
}

impl LayerKv {
    pub fn empty(n_kv_heads: usize, head_dim: usize) -> Self {
        Self {
            keys: Tensor::zeros(&[0, n_kv_heads, head_dim]),
            values: Tensor::zeros(&[0, n_kv_heads, head_dim]),
        }
    }

    pub fn tokens(&self) -> usize {
        self.keys.dims()[0]
    }
}

/// Attention context for a forward pass: per-layer keys already rotated at
/// `positions`, plus values.
#[derive(Debug, Clone, PartialEq)]
pub struct KvContext {
    pub config_hash: ConfigHash,
    pub positions: Vec<usize>,
    pub layers: Vec<LayerKv>,
}

impl KvContext {
    pub fn empty(weights: &ModelWeights) -> Self {
        let c = weights.config();
        Self {
            config_hash: weights.config_hash(),
            positions: Vec::new(),
            layers: (0..c.n_layers)
                .map(|_| LayerKv::empty(c.n_kv_heads, c.head_dim))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct EncodeOutput {
    /// Per-layer keys before rotation, and values.
    pub kv: Vec<LayerKv>,
    /// Residual stream after the last layer, `[tokens, d_model]`.
    pub hidden: Tensor,
    /// Number of (query, key) pairs that took part in attention, summed over
    /// rows of the mask (not multiplied by heads or layers).
    pub attended_pairs: u64,
}

/// Encode `tokens` against `context`.
///
/// `mask` has one row per new token and `context.len() + tokens.len()`
/// columns: context keys first, then the new tokens.
pub fn forward_encode(
    weights: &ModelWeights,
    tokens: &TokenSequence,
    context: &KvContext,
    mask: &BoolMatrix,
) -> Result<EncodeOutput> {
    let c = weights.config();
    if context.config_hash != weights.config_hash() {
        return Err(Error::ConfigHashMismatch {
            expected: weights.config_hash().to_string(),
            found: context.config_hash.to_string(),
        });
    }
    if context.layers.len() != c.n_layers
        || context.layers.iter().any(|l| l.tokens() != context.len())
    {
        return Err(Error::Shape("context does not cover every layer".into()));
    }
    tokens.check(weights)?;
    let t = tokens.len();
    let n_ctx = context.len();
    if mask.rows() != t || mask.cols() != n_ctx + t {
        return Err(Error::Shape(format!(
            "mask is {}x{}, expected {t}x{}",
            mask.rows(),
            mask.cols(),
            n_ctx + t
        )));
    }
    if let (Some(&ctx_max), Some(&first)) = (context.positions.iter().max(), tokens.positions.first()) {
        if ctx_max >= first {
            return Err(Error::Position(format!(
                "context position {ctx_max} overlaps new tokens starting at {first}"
            )));
        }
    }

    let hd = c.head_dim;
    let kv_width = c.kv_width();
    let q_width = c.n_heads * hd;
    let group = c.group_size();
    let scale = 1.0 / (hd as f32).sqrt();

    let embed = weights.get("embed");
    let mut x = Vec::with_capacity(t * c.d_model);
    for &id in &tokens.ids {
        x.extend_from_slice(embed.row(id as usize));
    }
    let mut x = Tensor::new(vec![t, c.d_model], x)?;

    let mut kv_out = Vec::with_capacity(c.n_layers);
    let mut scores = vec![0.0f32; n_ctx + t];
    let mut probs = vec![0.0f32; n_ctx + t];

    for layer in 0..c.n_layers {
        let h = rms_norm(&x, weights.layer(layer, "attn_norm").data(), c.norm_eps)?;
        let mut q = matmul(&h, weights.layer(layer, "wq"))?;
        let k_pre = matmul(&h, weights.layer(layer, "wk"))?;
        let v = matmul(&h, weights.layer(layer, "wv"))?;
        rotate_rows(q.data_mut(), q_width, hd, &tokens.positions, c.rope_theta)?;
        let mut k_rot = k_pre.clone();
        rotate_rows(k_rot.data_mut(), kv_width, hd, &tokens.positions, c.rope_theta)?;

        let ctx_k = context.layers[layer].keys.data();
        let ctx_v = context.layers[layer].values.data();
        let mut attn = vec![0.0f32; t * q_width];
        for r in 0..t {
            let allowed = mask.row(r);
            for head in 0..c.n_heads {
                let g = head / group;
                let qv = &q.data()[r * q_width + head * hd..r * q_width + (head + 1) * hd];
                let key_at = |col: usize| -> &[f32] {
                    if col < n_ctx {
                        &ctx_k[col * kv_width + g * hd..col * kv_width + (g + 1) * hd]
                    } else {
                        let j = col - n_ctx;
                        &k_rot.data()[j * kv_width + g * hd..j * kv_width + (g + 1) * hd]
                    }
                };
                for (col, s) in scores.iter_mut().enumerate() {
                    *s = if allowed[col] {
                        dot(qv, key_at(col)) * scale
                    } else {
                        0.0
                    };
                }
                tensor::softmax_row_into(&scores, allowed, &mut probs)
                    .map_err(|_| Error::EmptyMaskRow { row: r })?;
                let out = &mut attn[r * q_width + head * hd..r * q_width + (head + 1) * hd];
                for (col, &p) in probs.iter().enumerate() {
                    if !allowed[col] {
                        continue;
                    }
                    let val = if col < n_ctx {
                        &ctx_v[col * kv_width + g * hd..col * kv_width + (g + 1) * hd]
                    } else {
                        let j = col - n_ctx;
                        &v.data()[j * kv_width + g * hd..j * kv_width + (g + 1) * hd]
                    };
                    for (o, &vv) in out.iter_mut().zip(val) {
                        *o += p * vv;
                    }
                }
            }
        }
        let attn = Tensor::new(vec![t, q_width], attn)?;
        tensor::add_inplace(&mut x, &matmul(&attn, weights.layer(layer, "wo"))?)?;

        let h = rms_norm(&x, weights.layer(layer, "ffn_norm").data(), c.norm_eps)?;
        let gate = matmul(&h, weights.layer(layer, "w_gate"))?;
        let up = matmul(&h, weights.layer(layer, "w_up"))?;
        let ffn = matmul(&swiglu(&gate, &up)?, weights.layer(layer, "w_down"))?;
        tensor::add_inplace(&mut x, &ffn)?;

        kv_out.push(LayerKv {
            keys: k_pre.reshape(vec![t, c.n_kv_heads, hd])?,
            values: v.reshape(vec![t, c.n_kv_heads, hd])?,
        });
    }

    Ok(EncodeOutput {
        kv: kv_out,
        hidden: x,
        attended_pairs: mask.count_true(),
    })
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut s = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Final norm and output projection.
pub fn lm_head(weights: &ModelWeights, hidden: &Tensor) -> Result<Tensor> {
    let c = weights.config();
    let h = rms_norm(hidden, weights.get("final_norm").data(), c.norm_eps)?;
    if c.tied_lm_head {
        let (rows, _) = h.shape2()?;
        let embed = weights.get("embed");
        let mut out = Vec::with_capacity(rows * c.vocab_size);
        for r in 0..rows {
            for v in 0..c.vocab_size {
                out.push(dot(h.row(r), embed.row(v)));
            }
        }
        Tensor::new(vec![rows, c.vocab_size], out)
    } else {
        matmul(&h, weights.get("lm_head"))
    }
}

/// Mask for query tokens: every context key, then causal over the query.
pub fn query_mask(n_ctx: usize, n_query: usize) -> BoolMatrix {
    BoolMatrix::from_fn(n_query, n_ctx + n_query, |r, col| col < n_ctx || col - n_ctx <= r)
}

/// Next-token logits, `[query.len(), vocab_size]`, for a query placed
/// directly after the context.
pub fn forward_query(
    weights: &ModelWeights,
    context: &KvContext,
    query: &TokenSequence,
) -> Result<Tensor> {
    if context.config_hash != weights.config_hash() {
        return Err(Error::ConfigHashMismatch {
            expected: weights.config_hash().to_string(),
            found: context.config_hash.to_string(),
        });
    }
    let expected: Vec<usize> = (context.len()..context.len() + query.len()).collect();
    if query.positions != expected {
        return Err(Error::Position(format!(
            "query positions must run from {} in steps of one",
            context.len()
        )));
    }
    let mask = query_mask(context.len(), query.len());
    let out = forward_encode(weights, query, context, &mask)?;
    lm_head(weights, &out.hidden)
}

/// `log_softmax(row)[index]`, computed in f64.
pub fn log_prob(row: &[f32], index: usize) -> f64 {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
    row[index] as f64 - lse
}

/// Teacher-forced log-probability of `label` following `query`, summed over
/// label tokens.
pub fn score_label(
    weights: &ModelWeights,
    context: &KvContext,
    query: &[u32],
    label: &[u32],
) -> Result<f64> {
    if label.is_empty() {
        return Err(Error::Invalid("label must contain at least one token".into()));
    }
    if query.is_empty() {
        return Err(Error::Invalid("query must contain at least one token".into()));
    }
    let vocab = weights.config().vocab_size;
    if let Some(&bad) = label.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::OutOfVocab {
            token: bad,
            vocab_size: vocab,
        });
    }
    let mut ids = query.to_vec();
    ids.extend_from_slice(&label[..label.len() - 1]);
    let seq = TokenSequence::contiguous(ids, context.len());
    let logits = forward_query(weights, context, &seq)?;
    let first = query.len() - 1;
    Ok(label
        .iter()
        .enumerate()
        .map(|(s, &tok)| log_prob(logits.row(first + s), tok as usize))
        .sum())
}

/// Highest-scoring label; ties go to the lexicographically smallest label.
pub fn argmax_label<'a>(scored: impl IntoIterator<Item = (&'a str, f64)>) -> Option<&'a str> {
    let mut best: Option<(&str, f64)> = None;
    for (label, score) in scored {
        best = match best {
            None => Some((label, score)),
            Some((bl, bs)) if score > bs || (score == bs && label < bl) => Some((label, score)),
            keep => keep,
        };
    }
    best.map(|(l, _)| l)
}
