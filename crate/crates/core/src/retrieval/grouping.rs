//! Partitioning the demonstration pool into fixed-size blocks.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::bm25::{bm25_tokenize, Bm25Index, Bm25Params, IndexDoc};
use super::Granularity;
use crate::error::{Error, Result};
use crate::kv_store::Unit;
use crate::tensor::Rng;

pub const DEFAULT_SWAP_FRACTION: f64 = 0.10;
const KMEDOIDS_MAX_ITERS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GroupingStrategy {
    /// Seeded shuffle, then consecutive chunks.
    Random { seed: u64 },
    /// k-medoids over BM25 dissimilarity, balanced to the block size.
    Clustered { seed: u64 },
    /// `Clustered`, then a fraction of examples moved across clusters.
    ClusteredDiverse { seed: u64, swap_fraction: f64 },
}

impl GroupingStrategy {
    pub fn parse(name: &str, seed: u64) -> Result<Self> {
        match name {
            "random" => Ok(Self::Random { seed }),
            "clustered" => Ok(Self::Clustered { seed }),
            "clustered-diverse" => Ok(Self::ClusteredDiverse {
                seed,
                swap_fraction: DEFAULT_SWAP_FRACTION,
            }),
            other => Err(Error::Invalid(format!("unknown grouping {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Random { .. } => "random",
            Self::Clustered { .. } => "clustered",
            Self::ClusteredDiverse { .. } => "clustered-diverse",
        }
    }
}

impl fmt::Display for GroupingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Example ids per block, block 0 first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPartition {
    pub blocks: Vec<Vec<usize>>,
}

impl BlockPartition {
    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn n_examples(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }

    /// Block of every example, indexed by example id.
    pub fn assignment(&self) -> Vec<usize> {
        let mut out = vec![usize::MAX; self.n_examples()];
        for (b, members) in self.blocks.iter().enumerate() {
            for &e in members {
                out[e] = b;
            }
        }
        out
    }

    /// True when every id in `0..n` appears in exactly one block.
    pub fn is_partition_of(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        for &e in self.blocks.iter().flatten() {
            if e >= n || seen[e] {
                return false;
            }
            seen[e] = true;
        }
        seen.into_iter().all(|s| s)
    }
}

/// Block sizes for `n` examples: `k` each, the last block takes the rest.
fn capacities(n: usize, k: usize) -> Vec<usize> {
    let c = n.div_ceil(k);
    let mut caps = vec![k; c];
    caps[c - 1] = n - (c - 1) * k;
    caps
}

/// Group `texts` (one per example, ids = indices) into blocks of `block_size`.
pub fn group(texts: &[String], block_size: usize, strategy: GroupingStrategy) -> Result<BlockPartition> {
    if texts.is_empty() {
        return Err(Error::Invalid("cannot group an empty pool".into()));
    }
    if block_size == 0 {
        return Err(Error::Invalid("block size must be at least 1".into()));
    }
    match strategy {
        GroupingStrategy::Random { seed } => {
            let mut ids: Vec<usize> = (0..texts.len()).collect();
            Rng::new(seed).shuffle(&mut ids);
            Ok(BlockPartition {
                blocks: ids.chunks(block_size).map(<[usize]>::to_vec).collect(),
            })
        }
        GroupingStrategy::Clustered { seed } => clustered(texts, block_size, seed),
        GroupingStrategy::ClusteredDiverse { seed, swap_fraction } => {
            if !(0.0..=1.0).contains(&swap_fraction) {
                return Err(Error::Invalid(format!(
                    "swap fraction {swap_fraction} outside [0, 1]"
                )));
            }
            let base = clustered(texts, block_size, seed)?;
            let n_swaps = (swap_fraction * texts.len() as f64 + 1e-9).floor() as usize;
            Ok(diversify(&base, n_swaps, seed))
        }
    }
}

/// Pairwise dissimilarity `1 - sim`, where `sim` is the symmetrised BM25
/// score of one example's text against another's, normalised by each
/// example's self-score.
pub fn bm25_distance_matrix(texts: &[String]) -> Vec<Vec<f64>> {
    let docs = texts
        .iter()
        .enumerate()
        .map(|(i, t)| IndexDoc {
            unit: Unit::Example(i),
            block: 0,
            rank: i,
            text: t.clone(),
        })
        .collect();
    let index = Bm25Index::build(docs, Granularity::Example, Bm25Params::default())
        .expect("example units match example granularity");
    let terms: Vec<Vec<String>> = texts.iter().map(|t| bm25_tokenize(t)).collect();
    let n = texts.len();
    let raw: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| index.bm25_score(&terms[i], j)).collect())
        .collect();
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let rel = |a: usize, b: usize| {
                if raw[a][a] > 0.0 {
                    raw[a][b] / raw[a][a]
                } else {
                    0.0
                }
            };
            let sim = (0.5 * (rel(i, j) + rel(j, i))).clamp(0.0, 1.0);
            dist[i][j] = 1.0 - sim;
        }
    }
    dist
}

fn nearest(dist: &[Vec<f64>], i: usize, medoids: &[usize]) -> usize {
    let mut best = 0;
    for (c, &m) in medoids.iter().enumerate() {
        if dist[i][m] < dist[i][medoids[best]] {
            best = c;
        }
    }
    best
}

/// Plain alternating k-medoids with seeded farthest-point initialisation.
fn kmedoids(dist: &[Vec<f64>], n_clusters: usize, seed: u64) -> Vec<usize> {
    let n = dist.len();
    let mut rng = Rng::new(seed).split(1);
    let mut medoids = vec![rng.below(n)];
    while medoids.len() < n_clusters {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for i in 0..n {
            if medoids.contains(&i) {
                continue;
            }
            let d = medoids.iter().map(|&m| dist[i][m]).fold(f64::INFINITY, f64::min);
            if d > best.0 {
                best = (d, i);
            }
        }
        medoids.push(best.1);
    }
    for _ in 0..KMEDOIDS_MAX_ITERS {
        let assign: Vec<usize> = (0..n).map(|i| nearest(dist, i, &medoids)).collect();
        let mut changed = false;
        for (c, medoid) in medoids.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| assign[i] == c).collect();
            if members.is_empty() {
                continue;
            }
            let cost = |m: usize| members.iter().map(|&i| dist[i][m]).sum::<f64>();
            let mut best = *medoid;
            let mut best_cost = cost(best);
            for &m in &members {
                let c = cost(m);
                if c < best_cost {
                    best = m;
                    best_cost = c;
                }
            }
            if best != *medoid {
                *medoid = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    medoids
}

fn clustered(texts: &[String], block_size: usize, seed: u64) -> Result<BlockPartition> {
    let n = texts.len();
    let caps_sorted = capacities(n, block_size);
    let n_clusters = caps_sorted.len();
    let dist = bm25_distance_matrix(texts);
    let medoids = kmedoids(&dist, n_clusters, seed);

    // The cluster that is naturally smallest takes the short block.
    let mut natural = vec![0usize; n_clusters];
    for i in 0..n {
        natural[nearest(&dist, i, &medoids)] += 1;
    }
    let mut by_size: Vec<usize> = (0..n_clusters).collect();
    by_size.sort_by_key(|&c| (std::cmp::Reverse(natural[c]), c));
    let mut caps = vec![0; n_clusters];
    for (slot, &c) in by_size.iter().enumerate() {
        caps[c] = caps_sorted[slot];
    }

    // Greedy capacity-constrained assignment, closest pairs first.
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n * n_clusters);
    for i in 0..n {
        for (c, &m) in medoids.iter().enumerate() {
            pairs.push((dist[i][m], i, c));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut assigned = vec![false; n];
    let mut blocks: Vec<Vec<usize>> = vec![Vec::new(); n_clusters];
    for (_, i, c) in pairs {
        if !assigned[i] && blocks[c].len() < caps[c] {
            assigned[i] = true;
            blocks[c].push(i);
        }
    }
    for b in &mut blocks {
        b.sort_unstable();
    }
    blocks.sort_by_key(|b| b[0]);
    Ok(BlockPartition { blocks })
}

/// Move `n_moves` examples to other blocks, keeping block sizes.
///
/// Examples are drawn round-robin across blocks, sorted by block, and rotated
/// by the largest per-block count, which sends every chosen example to a
/// different block. When no such derangement exists (one block would hold
/// more than half of the chosen examples) the count is reduced until one does.
pub fn diversify(base: &BlockPartition, n_moves: usize, seed: u64) -> BlockPartition {
    let mut rng = Rng::new(seed).split(2);
    let mut order: Vec<usize> = (0..base.n_blocks()).collect();
    rng.shuffle(&mut order);
    let mut pools: Vec<Vec<usize>> = order
        .iter()
        .map(|&b| {
            let mut slots: Vec<usize> = (0..base.blocks[b].len()).collect();
            rng.shuffle(&mut slots);
            slots
        })
        .collect();

    // (block, slot) pairs, round-robin over blocks
    let mut chosen: Vec<(usize, usize)> = Vec::new();
    let mut progress = true;
    while chosen.len() < n_moves && progress {
        progress = false;
        for (i, &b) in order.iter().enumerate() {
            if chosen.len() == n_moves {
                break;
            }
            if let Some(slot) = pools[i].pop() {
                chosen.push((b, slot));
                progress = true;
            }
        }
    }
    let count_max = |chosen: &[(usize, usize)]| -> (usize, usize) {
        let mut counts = vec![0usize; base.n_blocks()];
        for &(b, _) in chosen {
            counts[b] += 1;
        }
        let (b, &m) = counts
            .iter()
            .enumerate()
            .max_by_key(|&(b, &c)| (c, std::cmp::Reverse(b)))
            .unwrap();
        (b, m)
    };
    loop {
        if chosen.is_empty() {
            return base.clone();
        }
        let (b, m) = count_max(&chosen);
        if 2 * m <= chosen.len() {
            break;
        }
        let pos = chosen.iter().rposition(|&(cb, _)| cb == b).unwrap();
        chosen.remove(pos);
    }
    chosen.sort_unstable();
    let shift = count_max(&chosen).1;
    let s = chosen.len();
    let mut blocks = base.blocks.clone();
    for (i, &(b, slot)) in chosen.iter().enumerate() {
        let (tb, tslot) = chosen[(i + shift) % s];
        blocks[tb][tslot] = base.blocks[b][slot];
    }
    for b in &mut blocks {
        b.sort_unstable();
    }
    BlockPartition { blocks }
}

/// Number of examples whose block differs between two partitions.
pub fn displaced(a: &BlockPartition, b: &BlockPartition) -> usize {
    let (aa, bb) = (a.assignment(), b.assignment());
    aa.iter().zip(&bb).filter(|(x, y)| x != y).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(n: usize) -> Vec<String> {
        let topics = ["weather rain cloud", "money bank loan", "music song band", "food pizza cheese"];
        (0..n)
            .map(|i| format!("{} item{} {}", topics[i % 4], i, topics[(i / 4) % 4].split(' ').next().unwrap()))
            .collect()
    }

    #[test]
    fn trec_shape_block_count() {
        let t: Vec<String> = (0..1050).map(|i| format!("q{i}")).collect();
        let p = group(&t, 50, GroupingStrategy::Random { seed: 1 }).unwrap();
        assert_eq!(p.n_blocks(), 21);
        assert!(p.blocks.iter().all(|b| b.len() == 50));
        assert!(p.is_partition_of(1050));
    }

    #[test]
    fn random_is_seeded() {
        let t = texts(37);
        let a = group(&t, 5, GroupingStrategy::Random { seed: 9 }).unwrap();
        let b = group(&t, 5, GroupingStrategy::Random { seed: 9 }).unwrap();
        let c = group(&t, 5, GroupingStrategy::Random { seed: 10 }).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.n_blocks(), 8);
        assert_eq!(a.blocks[7].len(), 2);
    }

    #[test]
    fn clustered_is_balanced_partition() {
        let t = texts(43);
        let p = group(&t, 10, GroupingStrategy::Clustered { seed: 2 }).unwrap();
        assert!(p.is_partition_of(43));
        let mut sizes: Vec<usize> = p.blocks.iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![3, 10, 10, 10, 10]);
    }

    #[test]
    fn clustered_groups_similar_texts() {
        // 4 topics x 10 examples, block size 10: clusters should be topic-pure
        let topics = ["weather rain cloud", "money bank loan", "music song band", "food pizza cheese"];
        let t: Vec<String> = (0..40).map(|i| format!("{} {}", topics[i % 4], i)).collect();
        let p = group(&t, 10, GroupingStrategy::Clustered { seed: 0 }).unwrap();
        for b in &p.blocks {
            assert!(b.iter().all(|&e| e % 4 == b[0] % 4), "{b:?}");
        }
    }

    #[test]
    fn diverse_displaces_exactly_ten_percent() {
        let t = texts(100);
        let base = group(&t, 10, GroupingStrategy::Clustered { seed: 4 }).unwrap();
        let div = group(
            &t,
            10,
            GroupingStrategy::ClusteredDiverse { seed: 4, swap_fraction: 0.1 },
        )
        .unwrap();
        assert!(div.is_partition_of(100));
        assert_eq!(displaced(&base, &div), 10);
        let sizes = |p: &BlockPartition| p.blocks.iter().map(Vec::len).collect::<Vec<_>>();
        assert_eq!(sizes(&base), sizes(&div));
    }

    #[test]
    fn two_blocks_odd_moves_round_down() {
        let base = BlockPartition {
            blocks: vec![(0..5).collect(), (5..10).collect()],
        };
        let d = diversify(&base, 3, 1);
        assert!(d.is_partition_of(10));
        assert_eq!(displaced(&base, &d), 2);
    }

    #[test]
    fn errors() {
        assert!(group(&[], 3, GroupingStrategy::Random { seed: 0 }).is_err());
        assert!(group(&texts(3), 0, GroupingStrategy::Random { seed: 0 }).is_err());
        assert!(group(
            &texts(3),
            1,
            GroupingStrategy::ClusteredDiverse { seed: 0, swap_fraction: 1.5 }
        )
        .is_err());
    }
}
