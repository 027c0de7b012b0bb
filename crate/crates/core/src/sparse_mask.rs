//! Block-level and token-level attention masks for the streaming block-sparse
//! patterns, plus exact pair counts and sparsity.
//!
//! Blocks are 0-indexed; block 0 is the anchor (attention sink).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::BoolMatrix;

pub const DEFAULT_LOCAL_BLOCKS: usize = 2;

/// Which earlier blocks a block may attend to during pool encoding. Within a
/// block, attention is always causal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AttentionPattern {
    /// Every earlier block.
    Full,
    /// The anchor, the `local_blocks` immediately preceding blocks, and itself.
    SinkPrevSelf { local_blocks: usize },
    /// The anchor and itself.
    SinkSelf,
    /// Only itself.
    SelfOnly,
}

impl Default for AttentionPattern {
    fn default() -> Self {
        AttentionPattern::SinkPrevSelf {
            local_blocks: DEFAULT_LOCAL_BLOCKS,
        }
    }
}

impl AttentionPattern {
    /// Parse a CLI name (`full`, `sink-prev-self`, `sink-self`, `self`).
    pub fn parse(name: &str, local_blocks: usize) -> Result<Self> {
        match name {
            "full" => Ok(Self::Full),
            "sink-prev-self" => Ok(Self::SinkPrevSelf { local_blocks }),
            "sink-self" => Ok(Self::SinkSelf),
            "self" | "self-only" => Ok(Self::SelfOnly),
            other => Err(Error::Invalid(format!("unknown attention pattern {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::SinkPrevSelf { .. } => "sink-prev-self",
            Self::SinkSelf => "sink-self",
            Self::SelfOnly => "self",
        }
    }

    /// Whether block `row` may attend to block `col`.
    pub fn allows(&self, row: usize, col: usize) -> bool {
        if col > row {
            return false;
        }
        match *self {
            Self::Full => true,
            Self::SinkPrevSelf { local_blocks } => col == 0 || col + local_blocks >= row,
            Self::SinkSelf => col == 0 || col == row,
            Self::SelfOnly => col == row,
        }
    }
}

impl fmt::Display for AttentionPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::SinkPrevSelf { local_blocks } => write!(f, "sink-prev-self({local_blocks})"),
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for AttentionPattern {
    type Err = Error;

    /// Accepts the CLI names, with an optional `(j)` suffix on `sink-prev-self`.
    fn from_str(s: &str) -> Result<Self> {
        if let Some(rest) = s.strip_prefix("sink-prev-self(") {
            let j = rest
                .strip_suffix(')')
                .and_then(|n| n.parse().ok())
                .ok_or_else(|| Error::Invalid(format!("bad pattern {s:?}")))?;
            return Ok(Self::SinkPrevSelf { local_blocks: j });
        }
        Self::parse(s, DEFAULT_LOCAL_BLOCKS)
    }
}

/// `B × B` block mask; row = attending block, column = attended block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMask {
    pattern: AttentionPattern,
    allowed: BoolMatrix,
}

pub fn build_block_mask(n_blocks: usize, pattern: AttentionPattern) -> Result<BlockMask> {
    if n_blocks < 1 {
        return Err(Error::Invalid("a block mask needs at least one block".into()));
    }
    let allowed = BoolMatrix::from_fn(n_blocks, n_blocks, |r, c| pattern.allows(r, c));
    Ok(BlockMask { pattern, allowed })
}

impl BlockMask {
    pub fn n_blocks(&self) -> usize {
        self.allowed.rows()
    }

    pub fn pattern(&self) -> AttentionPattern {
        self.pattern
    }

    pub fn allows(&self, row: usize, col: usize) -> bool {
        self.allowed.get(row, col)
    }

    pub fn matrix(&self) -> &BoolMatrix {
        &self.allowed
    }

    /// Earlier blocks visible to `row`, ascending, excluding `row` itself.
    pub fn context_blocks(&self, row: usize) -> Vec<usize> {
        (0..row).filter(|&c| self.allows(row, c)).collect()
    }

    pub fn allowed_pairs(&self) -> u64 {
        self.allowed.count_true()
    }

    pub fn causal_pairs(&self) -> u64 {
        let b = self.n_blocks() as u64;
        b * (b + 1) / 2
    }

    /// `1 - allowed / causal` over block pairs.
    pub fn block_sparsity(&self) -> f64 {
        1.0 - self.allowed_pairs() as f64 / self.causal_pairs() as f64
    }
}

/// Token-level expansion of a [`BlockMask`]: across blocks the block mask
/// decides, within a block attention is causal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMask {
    blocks: BlockMask,
    block_lens: Vec<usize>,
    offsets: Vec<usize>,
}

impl TokenMask {
    pub fn new(blocks: BlockMask, block_lens: Vec<usize>) -> Result<Self> {
        if block_lens.len() != blocks.n_blocks() {
            return Err(Error::Shape(format!(
                "{} block lengths for {} blocks",
                block_lens.len(),
                blocks.n_blocks()
            )));
        }
        if block_lens.contains(&0) {
            return Err(Error::Invalid("block lengths must be positive".into()));
        }
        let mut offsets = Vec::with_capacity(block_lens.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for &l in &block_lens {
            acc += l;
            offsets.push(acc);
        }
        Ok(Self {
            blocks,
            block_lens,
            offsets,
        })
    }

    pub fn block_mask(&self) -> &BlockMask {
        &self.blocks
    }

    pub fn block_lens(&self) -> &[usize] {
        &self.block_lens
    }

    pub fn total_tokens(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Block containing token `t`.
    pub fn block_of(&self, t: usize) -> usize {
        self.offsets.partition_point(|&o| o <= t) - 1
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        if key > query {
            return false;
        }
        let (bq, bk) = (self.block_of(query), self.block_of(key));
        bq == bk || self.blocks.allows(bq, bk)
    }

    /// Exact count of allowed (query, key) pairs.
    pub fn allowed_pairs(&self) -> u64 {
        let mut total = 0u64;
        for (r, &lr) in self.block_lens.iter().enumerate() {
            let lr = lr as u64;
            total += lr * (lr + 1) / 2;
            for c in self.blocks.context_blocks(r) {
                total += lr * self.block_lens[c] as u64;
            }
        }
        total
    }

    pub fn causal_pairs(&self) -> u64 {
        let t = self.total_tokens() as u64;
        t * (t + 1) / 2
    }

    /// Rows for encoding block `row` in its own pass: columns are the tokens
    /// of its context blocks (ascending) followed by its own tokens.
    pub fn block_pass_mask(&self, row: usize) -> BoolMatrix {
        let ctx: usize = self
            .blocks
            .context_blocks(row)
            .iter()
            .map(|&c| self.block_lens[c])
            .sum();
        BoolMatrix::from_fn(self.block_lens[row], ctx + self.block_lens[row], |r, c| {
            c < ctx || c - ctx <= r
        })
    }

    /// Dense `T × T` matrix.
    pub fn to_matrix(&self) -> BoolMatrix {
        let t = self.total_tokens();
        BoolMatrix::from_fn(t, t, |q, k| self.allows(q, k))
    }
}

/// `1 - allowed / dense-causal` over token pairs.
pub fn token_sparsity(mask: &TokenMask) -> f64 {
    1.0 - mask.allowed_pairs() as f64 / mask.causal_pairs() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    const ALL: [AttentionPattern; 4] = [
        AttentionPattern::Full,
        AttentionPattern::SinkPrevSelf { local_blocks: 2 },
        AttentionPattern::SinkSelf,
        AttentionPattern::SelfOnly,
    ];

    fn row_set(m: &BlockMask, r: usize) -> Vec<usize> {
        (0..m.n_blocks()).filter(|&c| m.allows(r, c)).collect()
    }

    #[test]
    fn single_block_is_just_itself() {
        for p in ALL {
            let m = build_block_mask(1, p).unwrap();
            assert_eq!(m.allowed_pairs(), 1);
            assert!(m.allows(0, 0));
        }
    }

    #[test]
    fn zero_blocks_rejected() {
        assert!(build_block_mask(0, AttentionPattern::Full).is_err());
    }

    #[test]
    fn sink_prev_self_row_five() {
        // blocks 1..=5 in 1-based terms: row 5 sees {1, 3, 4, 5}
        let m = build_block_mask(5, AttentionPattern::default()).unwrap();
        assert_eq!(row_set(&m, 4), vec![0, 2, 3, 4]);
        assert_eq!(m.context_blocks(4), vec![0, 2, 3]);
    }

    #[test]
    fn sink_self_row_four() {
        let m = build_block_mask(4, AttentionPattern::SinkSelf).unwrap();
        assert_eq!(row_set(&m, 3), vec![0, 3]);
    }

    #[test]
    fn early_rows_truncate_and_dedupe_with_sink() {
        let m = build_block_mask(4, AttentionPattern::default()).unwrap();
        assert_eq!(row_set(&m, 1), vec![0, 1]);
        assert_eq!(row_set(&m, 2), vec![0, 1, 2]);
        assert_eq!(row_set(&m, 3), vec![0, 1, 2, 3]);
    }

    #[test]
    fn sixty_blocks_pair_count() {
        let m = build_block_mask(60, AttentionPattern::default()).unwrap();
        assert_eq!(m.allowed_pairs(), 234);
        assert_eq!(m.causal_pairs(), 1830);
    }

    #[test]
    fn full_has_zero_sparsity() {
        let m = build_block_mask(7, AttentionPattern::Full).unwrap();
        let tm = TokenMask::new(m, vec![3, 1, 4, 1, 5, 9, 2]).unwrap();
        assert_eq!(token_sparsity(&tm), 0.0);
    }

    #[test]
    fn self_only_sparsity_approaches_one_minus_inverse_b() {
        let b = 400;
        let m = build_block_mask(b, AttentionPattern::SelfOnly).unwrap();
        let tm = TokenMask::new(m, vec![100; b]).unwrap();
        let s = token_sparsity(&tm);
        assert!((s - (1.0 - 1.0 / b as f64)).abs() < 1e-4, "{s}");
    }

    #[test]
    fn block_pass_mask_shape() {
        let m = build_block_mask(5, AttentionPattern::default()).unwrap();
        let tm = TokenMask::new(m, vec![2, 3, 4, 5, 6]).unwrap();
        let pm = tm.block_pass_mask(4);
        // context blocks 0, 2, 3 → 2 + 4 + 5 tokens
        assert_eq!((pm.rows(), pm.cols()), (6, 11 + 6));
        assert!(pm.get(0, 10) && pm.get(0, 11) && !pm.get(0, 12));
        assert!(pm.get(5, 16));
    }

    #[test]
    fn pattern_names_round_trip() {
        for p in ALL {
            let parsed: AttentionPattern = p.to_string().parse().unwrap();
            assert_eq!(parsed, p);
        }
        assert_eq!(
            AttentionPattern::parse("sink-prev-self", 3).unwrap(),
            AttentionPattern::SinkPrevSelf { local_blocks: 3 }
        );
        assert!(AttentionPattern::parse("dense", 2).is_err());
    }
}
