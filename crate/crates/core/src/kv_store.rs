//! Segmented pre-rotation KV cache.
//!
//! Stage 1 appends one segment per block, keys stored *before* rotation.
//! Stage 2 concatenates any selection of segments, re-numbers positions from
//! zero and rotates keys at their new positions.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::rope::rotate_in_place;
use crate::model::{ByteReader, ConfigHash, KvContext, LayerKv, ModelConfig, ModelWeights};
use crate::tensor::Tensor;

pub const CACHE_MAGIC: &[u8; 8] = b"DBSACACH";
pub const CACHE_VERSION: u32 = 1;
/// magic, version, config hash, n_layers, n_kv_heads, head_dim, n_blocks
pub const CACHE_HEADER_BYTES: usize = 8 + 4 + 32 + 4 * 4;

pub fn text_digest(text: &str) -> [u8; 32] {
    bytes_digest(text.as_bytes())
}

/// SHA-256 of raw bytes.
pub fn bytes_digest(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

/// Token span of one demonstration inside its block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleSpan {
    pub example_id: usize,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockEntry {
    pub id: usize,
    pub token_count: usize,
    /// First original position; the block covers `start..start + token_count`.
    pub start_position: usize,
    pub digest: [u8; 32],
    pub examples: Vec<ExampleSpan>,
}

impl BlockEntry {
    /// Serialized size of this table entry.
    pub fn table_bytes(&self) -> usize {
        4 + 4 + 8 + 32 + 4 + 12 * self.examples.len()
    }
}

/// A retrievable unit: a whole block, or one demonstration inside a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "lowercase")]
pub enum Unit {
    Block(usize),
    Example(usize),
}

impl Unit {
    pub const ANCHOR: Unit = Unit::Block(0);
}

impl std::fmt::Display for Unit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Unit::Block(id) => write!(f, "b{id}"),
            Unit::Example(id) => write!(f, "e{id}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedKvCache {
    config_hash: ConfigHash,
    n_layers: usize,
    n_kv_heads: usize,
    head_dim: usize,
    rope_theta: f32,
    blocks: Vec<BlockEntry>,
    /// `segments[block][layer]`, keys unrotated.
    segments: Vec<Vec<LayerKv>>,
}

impl SegmentedKvCache {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            config_hash: config.hash(),
            n_layers: config.n_layers,
            n_kv_heads: config.n_kv_heads,
            head_dim: config.head_dim,
            rope_theta: config.rope_theta,
            blocks: Vec::new(),
            segments: Vec::new(),
        }
    }

    pub fn config_hash(&self) -> ConfigHash {
        self.config_hash
    }

    pub fn blocks(&self) -> &[BlockEntry] {
        &self.blocks
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn total_tokens(&self) -> usize {
        self.blocks
            .last()
            .map_or(0, |b| b.start_position + b.token_count)
    }

    pub fn segment(&self, block: usize) -> Option<&[LayerKv]> {
        self.segments.get(block).map(Vec::as_slice)
    }

    pub fn n_examples(&self) -> usize {
        self.blocks.iter().map(|b| b.examples.len()).sum()
    }

    /// Append the next block. `kv` holds one pre-rotation segment per layer.
    pub fn append_block(
        &mut self,
        block_id: usize,
        kv: Vec<LayerKv>,
        token_count: usize,
        digest: [u8; 32],
        examples: Vec<ExampleSpan>,
        config_hash: ConfigHash,
    ) -> Result<()> {
        if config_hash != self.config_hash {
            return Err(Error::ConfigHashMismatch {
                expected: self.config_hash.to_string(),
                found: config_hash.to_string(),
            });
        }
        if block_id != self.blocks.len() {
            return Err(Error::BlockIdGap {
                expected: self.blocks.len(),
                got: block_id,
            });
        }
        if token_count == 0 {
            return Err(Error::Invalid("a block needs at least one token".into()));
        }
        let dims = [token_count, self.n_kv_heads, self.head_dim];
        if kv.len() != self.n_layers
            || kv
                .iter()
                .any(|l| l.keys.dims() != dims || l.values.dims() != dims)
        {
            return Err(Error::Shape(format!(
                "block {block_id} segment does not match {} layers of {dims:?}",
                self.n_layers
            )));
        }
        if examples
            .iter()
            .any(|e| e.len == 0 || e.offset + e.len > token_count)
        {
            return Err(Error::Invalid(format!(
                "block {block_id} has an example span outside the block"
            )));
        }
        let start_position = self.total_tokens();
        self.blocks.push(BlockEntry {
            id: block_id,
            token_count,
            start_position,
            digest,
            examples,
        });
        self.segments.push(kv);
        Ok(())
    }

    /// (block, offset within block, length) covered by a unit.
    pub fn locate(&self, unit: Unit) -> Result<(usize, usize, usize)> {
        match unit {
            Unit::Block(b) => self
                .blocks
                .get(b)
                .map(|e| (b, 0, e.token_count))
                .ok_or_else(|| Error::UnknownUnit(unit.to_string())),
            Unit::Example(id) => self
                .blocks
                .iter()
                .find_map(|b| {
                    b.examples
                        .iter()
                        .find(|e| e.example_id == id)
                        .map(|e| (b.id, e.offset, e.len))
                })
                .ok_or_else(|| Error::UnknownUnit(unit.to_string())),
        }
    }

    /// Block holding an example, if any.
    pub fn block_of_example(&self, example_id: usize) -> Option<usize> {
        self.locate(Unit::Example(example_id)).ok().map(|(b, _, _)| b)
    }

    /// Context of whole blocks rotated at their original positions; this is
    /// what Stage 1 feeds to a block's encoding pass.
    pub fn original_context(&self, blocks: &[usize]) -> Result<KvContext> {
        let pieces = blocks
            .iter()
            .map(|&b| self.locate(Unit::Block(b)))
            .collect::<Result<Vec<_>>>()?;
        let (ctx, _) = self.gather(&pieces, |block, offset, _| {
            self.blocks[block].start_position + offset
        })?;
        Ok(ctx)
    }

    /// Concatenate `pieces` (block, offset, len), rotating each key at the
    /// position returned by `position_of(block, offset, new_index)`.
    fn gather(
        &self,
        pieces: &[(usize, usize, usize)],
        position_of: impl Fn(usize, usize, usize) -> usize,
    ) -> Result<(KvContext, Vec<(usize, usize)>)> {
        let width = self.n_kv_heads * self.head_dim;
        let total: usize = pieces.iter().map(|p| p.2).sum();
        let mut keys: Vec<Vec<f32>> = (0..self.n_layers)
            .map(|_| Vec::with_capacity(total * width))
            .collect();
        let mut values = keys.clone();
        let mut positions = Vec::with_capacity(total);
        let mut origin = Vec::with_capacity(total);
        for &(block, offset, len) in pieces {
            for i in 0..len {
                positions.push(position_of(block, offset + i, positions.len()));
                origin.push((block, offset + i));
            }
            let seg = &self.segments[block];
            for layer in 0..self.n_layers {
                let range = offset * width..(offset + len) * width;
                keys[layer].extend_from_slice(&seg[layer].keys.data()[range.clone()]);
                values[layer].extend_from_slice(&seg[layer].values.data()[range]);
            }
        }
        let mut layers = Vec::with_capacity(self.n_layers);
        for (mut k, v) in keys.into_iter().zip(values) {
            for (row, &pos) in k.chunks_exact_mut(width).zip(&positions) {
                for head in row.chunks_exact_mut(self.head_dim) {
                    rotate_in_place(head, pos, self.rope_theta)?;
                }
            }
            let dims = vec![total, self.n_kv_heads, self.head_dim];
            layers.push(LayerKv {
                keys: Tensor::new(dims.clone(), k)?,
                values: Tensor::new(dims, v)?,
            });
        }
        Ok((
            KvContext {
                config_hash: self.config_hash,
                positions,
                layers,
            },
            origin,
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&CACHE_VERSION.to_le_bytes())?;
        w.write_all(&self.config_hash.0)?;
        for v in [self.n_layers, self.n_kv_heads, self.head_dim, self.blocks.len()] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for b in &self.blocks {
            w.write_all(&(b.id as u32).to_le_bytes())?;
            w.write_all(&(b.token_count as u32).to_le_bytes())?;
            w.write_all(&(b.start_position as u64).to_le_bytes())?;
            w.write_all(&b.digest)?;
            w.write_all(&(b.examples.len() as u32).to_le_bytes())?;
            for e in &b.examples {
                for v in [e.example_id, e.offset, e.len] {
                    w.write_all(&(v as u32).to_le_bytes())?;
                }
            }
        }
        for layer in 0..self.n_layers {
            for seg in &self.segments {
                for v in seg[layer].keys.data().iter().chain(seg[layer].values.data()) {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    /// Load a cache file. `rope_theta` is not part of the file; it comes from
    /// the model the cache is paired with.
    pub fn load(path: &Path, config: &ModelConfig) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, config)
    }

    pub fn load_for(path: &Path, weights: &ModelWeights) -> Result<Self> {
        Self::load(path, weights.config())
    }

    pub fn from_bytes(bytes: &[u8], config: &ModelConfig) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(8)? != CACHE_MAGIC {
            return Err(Error::Format("bad cache file magic".into()));
        }
        let version = r.u32()?;
        if version != CACHE_VERSION {
            return Err(Error::Format(format!("unsupported cache version {version}")));
        }
        let hash = ConfigHash(r.array32()?);
        if hash != config.hash() {
            return Err(Error::ConfigHashMismatch {
                expected: config.hash().to_string(),
                found: hash.to_string(),
            });
        }
        let n_layers = r.u32()? as usize;
        let n_kv_heads = r.u32()? as usize;
        let head_dim = r.u32()? as usize;
        let n_blocks = r.u32()? as usize;
        if (n_layers, n_kv_heads, head_dim) != (config.n_layers, config.n_kv_heads, config.head_dim) {
            return Err(Error::Format("cache dims disagree with model config".into()));
        }
        let mut cache = Self::new(config);
        let mut entries = Vec::with_capacity(n_blocks);
        for _ in 0..n_blocks {
            let id = r.u32()? as usize;
            let token_count = r.u32()? as usize;
            let start_position = r.u64()? as usize;
            let digest = r.array32()?;
            let n_ex = r.u32()? as usize;
            let examples = (0..n_ex)
                .map(|_| {
                    Ok(ExampleSpan {
                        example_id: r.u32()? as usize,
                        offset: r.u32()? as usize,
                        len: r.u32()? as usize,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            entries.push(BlockEntry {
                id,
                token_count,
                start_position,
                digest,
                examples,
            });
        }
        let width = n_kv_heads * head_dim;
        let mut segs: Vec<Vec<LayerKv>> = vec![Vec::with_capacity(n_layers); n_blocks];
        for _ in 0..n_layers {
            for (b, e) in entries.iter().enumerate() {
                let dims = vec![e.token_count, n_kv_heads, head_dim];
                let keys = Tensor::new(dims.clone(), r.f32s(e.token_count * width)?)?;
                let values = Tensor::new(dims, r.f32s(e.token_count * width)?)?;
                segs[b].push(LayerKv { keys, values });
            }
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after cache segments".into()));
        }
        for (entry, kv) in entries.into_iter().zip(segs) {
            let start = entry.start_position;
            cache.append_block(
                entry.id,
                kv,
                entry.token_count,
                entry.digest,
                entry.examples,
                hash,
            )?;
            if cache.blocks.last().unwrap().start_position != start {
                return Err(Error::Format("block positions are not contiguous".into()));
            }
        }
        Ok(cache)
    }
}

/// A selection realised as one contiguous context for a query.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledCache {
    pub context: KvContext,
    /// `origin[p]` = (block, offset within block) of new position `p`.
    pub origin: Vec<(usize, usize)>,
    pub units: Vec<Unit>,
}

impl AssembledCache {
    pub fn len(&self) -> usize {
        self.context.len()
    }

    pub fn is_empty(&self) -> bool {
        self.context.is_empty()
    }
}

/// Concatenate the segments of `units` in the given order, assign positions
/// `0..T'` and rotate keys at those positions. Values are copied unchanged.
///
/// The first unit must be the anchor block.
pub fn assemble(cache: &SegmentedKvCache, units: &[Unit]) -> Result<AssembledCache> {
    if units.first() != Some(&Unit::ANCHOR) {
        return Err(Error::Selection("the anchor block must come first".into()));
    }
    let mut seen = HashSet::new();
    let mut covered: HashSet<(usize, usize)> = HashSet::new();
    let mut pieces = Vec::with_capacity(units.len());
    for &u in units {
        if !seen.insert(u) {
            return Err(Error::DuplicateUnit(u.to_string()));
        }
        let piece = cache.locate(u)?;
        let (block, offset, len) = piece;
        if (offset..offset + len).any(|o| !covered.insert((block, o))) {
            return Err(Error::DuplicateUnit(format!("{u} overlaps an earlier unit")));
        }
        pieces.push(piece);
    }
    let (context, origin) = cache.gather(&pieces, |_, _, new| new)?;
    Ok(AssembledCache {
        context,
        origin,
        units: units.to_vec(),
    })
}

/// Bytes needed to hold keys and values for `n_tokens` tokens.
pub fn storage_bytes(config: &ModelConfig, n_tokens: u64, bytes_per_value: u64) -> Result<u64> {
    if !matches!(bytes_per_value, 2 | 4) {
        return Err(Error::Invalid(format!(
            "bytes_per_value must be 2 or 4, got {bytes_per_value}"
        )));
    }
    Ok(2 * config.n_layers as u64
        * config.n_kv_heads as u64
        * config.head_dim as u64
        * bytes_per_value
        * n_tokens)
}
