use std::fmt;

use serde::{Deserialize, Serialize};

use super::bm25::{bm25_tokenize, Bm25Index};
use super::Granularity;
use crate::error::{Error, Result};
use crate::kv_store::Unit;

pub const DEFAULT_RATIO: f64 = 0.30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectedUnit {
    pub unit: Unit,
    pub score: f64,
    /// Position in encoded pool order; lower = encoded earlier.
    pub rank: usize,
}

/// Ordered units for one query; the anchor block is always first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub granularity: Granularity,
    pub entries: Vec<SelectedUnit>,
}

impl Selection {
    pub fn units(&self) -> Vec<Unit> {
        self.entries.iter().map(|e| e.unit).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Units sorted, for order-independent comparisons.
    pub fn unit_multiset(&self) -> Vec<Unit> {
        let mut u = self.units();
        u.sort_unstable();
        u
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderingStrategy {
    /// Encoded pool order.
    #[default]
    InOrder,
    /// Least relevant first, most relevant next to the query.
    LowToHigh,
    /// Encoded pool order reversed.
    Reverse,
}

impl OrderingStrategy {
    pub const ALL: [OrderingStrategy; 3] = [Self::InOrder, Self::LowToHigh, Self::Reverse];

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "in-order" => Ok(Self::InOrder),
            "low-to-high" => Ok(Self::LowToHigh),
            "reverse" => Ok(Self::Reverse),
            other => Err(Error::Invalid(format!("unknown ordering {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::InOrder => "in-order",
            Self::LowToHigh => "low-to-high",
            Self::Reverse => "reverse",
        }
    }
}

impl fmt::Display for OrderingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `⌈ratio × n⌉`, robust to `0.3 × 20 = 6.000000000000001`.
pub fn budget(ratio: f64, n_units: usize) -> usize {
    let raw = ratio * n_units as f64;
    let rounded = raw.round();
    let b = if (raw - rounded).abs() < 1e-9 {
        rounded
    } else {
        raw.ceil()
    };
    (b as usize).clamp(1, n_units.max(1))
}

/// Pick `⌈ratio × units⌉` units for a query. The anchor block takes the first
/// slot; the rest go to the highest BM25 scores, ties to the earlier unit.
///
/// At example granularity the anchor block's own demonstrations are not
/// candidates, since the anchor already carries them.
pub fn select(index: &Bm25Index, query_text: &str, ratio: f64) -> Result<Selection> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Invalid(format!("ratio {ratio} outside (0, 1]")));
    }
    if index.is_empty() {
        return Err(Error::Invalid("cannot select from an empty index".into()));
    }
    let terms = bm25_tokenize(query_text);
    let scores = index.score_all(&terms);
    let n = budget(ratio, index.len());

    let anchor_score = (0..index.len())
        .filter(|&d| index.block_of(d) == 0)
        .map(|d| scores[d])
        .fold(0.0, f64::max);
    let mut entries = vec![SelectedUnit {
        unit: Unit::ANCHOR,
        score: anchor_score,
        rank: 0,
    }];

    let mut candidates: Vec<usize> = (0..index.len())
        .filter(|&d| index.block_of(d) != 0)
        .collect();
    candidates.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then(index.rank(a).cmp(&index.rank(b)))
    });
    entries.extend(candidates.into_iter().take(n - 1).map(|d| SelectedUnit {
        unit: index.unit(d),
        score: scores[d],
        rank: index.rank(d),
    }));
    Ok(Selection {
        granularity: index.granularity(),
        entries,
    })
}

/// Re-order a selection. The anchor stays first under every strategy.
pub fn order(selection: &Selection, strategy: OrderingStrategy) -> Selection {
    let mut out = selection.clone();
    let pinned = usize::from(out.entries.first().map(|e| e.unit) == Some(Unit::ANCHOR));
    let rest = &mut out.entries[pinned..];
    match strategy {
        OrderingStrategy::InOrder => rest.sort_by_key(|e| e.rank),
        OrderingStrategy::Reverse => rest.sort_by_key(|e| std::cmp::Reverse(e.rank)),
        OrderingStrategy::LowToHigh => {
            rest.sort_by(|a, b| a.score.total_cmp(&b.score).then(a.rank.cmp(&b.rank)))
        }
    }
    out
}

/// Top `⌈ratio × n⌉` units by score with no anchor, returned in encoded
/// order. This is the conventional retrieval ICL selection.
pub fn select_plain(index: &Bm25Index, query_text: &str, ratio: f64) -> Result<Vec<Unit>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Invalid(format!("ratio {ratio} outside (0, 1]")));
    }
    let terms = bm25_tokenize(query_text);
    let scores = index.score_all(&terms);
    let mut docs: Vec<usize> = (0..index.len()).collect();
    docs.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then(index.rank(a).cmp(&index.rank(b)))
    });
    docs.truncate(budget(ratio, index.len()));
    docs.sort_by_key(|&d| index.rank(d));
    Ok(docs.into_iter().map(|d| index.unit(d)).collect())
}
