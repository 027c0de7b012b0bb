use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ConfigHash, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

pub const WEIGHTS_MAGIC: &[u8; 8] = b"DBSAMODL";
pub const WEIGHTS_VERSION: u32 = 1;

/// Immutable parameter set of a model, keyed by tensor name.
///
/// Names: `embed`, `final_norm`, `lm_head` (absent when tied) and per layer
/// `layers.{i}.{attn_norm,wq,wk,wv,wo,ffn_norm,w_gate,w_up,w_down}`.
/// Projections are stored `[in, out]` so activations multiply on the left.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    config: ModelConfig,
    config_hash: ConfigHash,
    tensors: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct FileHeader {
    config: ModelConfig,
    checksum: String,
}

pub(crate) fn layer_name(layer: usize, part: &str) -> String {
    format!("layers.{layer}.{part}")
}

fn expected_shapes(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let q = c.n_heads * c.head_dim;
    let kv = c.kv_width();
    let mut out = vec![
        ("embed".to_string(), vec![c.vocab_size, c.d_model]),
        ("final_norm".to_string(), vec![c.d_model]),
    ];
    if !c.tied_lm_head {
        out.push(("lm_head".to_string(), vec![c.d_model, c.vocab_size]));
    }
    for l in 0..c.n_layers {
        out.extend([
            (layer_name(l, "attn_norm"), vec![c.d_model]),
            (layer_name(l, "wq"), vec![c.d_model, q]),
            (layer_name(l, "wk"), vec![c.d_model, kv]),
            (layer_name(l, "wv"), vec![c.d_model, kv]),
            (layer_name(l, "wo"), vec![q, c.d_model]),
            (layer_name(l, "ffn_norm"), vec![c.d_model]),
            (layer_name(l, "w_gate"), vec![c.d_model, c.ffn_dim]),
            (layer_name(l, "w_up"), vec![c.d_model, c.ffn_dim]),
            (layer_name(l, "w_down"), vec![c.ffn_dim, c.d_model]),
        ]);
    }
    out
}

impl ModelWeights {
    pub fn from_tensors(config: ModelConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = expected_shapes(&config);
        if expected.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (name, dims) in &expected {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Shape(format!("missing tensor {name}")))?;
            if t.dims() != dims.as_slice() {
                return Err(Error::Shape(format!(
                    "{name} has dims {:?}, expected {dims:?}",
                    t.dims()
                )));
            }
        }
        let config_hash = config.hash();
        Ok(Self {
            config,
            config_hash,
            tensors,
        })
    }

    /// Deterministic scaled-uniform initialisation: projections draw from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, norms start at one.
    pub fn init_random(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let rng = Rng::new(seed);
        let mut tensors = BTreeMap::new();
        for (i, (name, dims)) in expected_shapes(config).into_iter().enumerate() {
            let t = if dims.len() == 1 {
                Tensor::new(dims.clone(), vec![1.0; dims[0]])?
            } else {
                let scale = if name == "embed" {
                    1.0
                } else {
                    1.0 / (dims[0] as f32).sqrt()
                };
                rng.split(i as u64).tensor_uniform(&dims, scale)
            };
            tensors.insert(name, t);
        }
        Self::from_tensors(config.clone(), tensors)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn config_hash(&self) -> ConfigHash {
        self.config_hash
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> &Tensor {
        // from_tensors checked the full name set
        &self.tensors[name]
    }

    pub fn layer(&self, layer: usize, part: &str) -> &Tensor {
        self.get(&layer_name(layer, part))
    }

    /// SHA-256 over every tensor's name, dims and little-endian data.
    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update((name.len() as u32).to_le_bytes());
            h.update(name.as_bytes());
            for &d in t.dims() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(WEIGHTS_MAGIC)?;
        w.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
        let header = serde_json::to_vec(&FileHeader {
            config: self.config.clone(),
            checksum: hex::encode(self.checksum()),
        })?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.dims().len() as u32).to_le_bytes())?;
            for &d in t.dims() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(8)? != WEIGHTS_MAGIC {
            return Err(Error::Format("bad weight file magic".into()));
        }
        let version = r.u32()?;
        if version != WEIGHTS_VERSION {
            return Err(Error::Format(format!("unsupported weight file version {version}")));
        }
        let header_len = r.u32()? as usize;
        let header: FileHeader = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| Error::Format(format!("weight header: {e}")))?;
        let mut tensors = BTreeMap::new();
        while !r.is_empty() {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let data = r.f32s(n)?;
            tensors.insert(name, Tensor::new(dims, data)?);
        }
        let weights = Self::from_tensors(header.config, tensors)?;
        if hex::encode(weights.checksum()) != header.checksum {
            return Err(Error::Format("weight checksum does not match header".into()));
        }
        Ok(weights)
    }
}

/// Little-endian cursor over a byte slice, erroring on truncation.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn array32(&mut self) -> Result<[u8; 32]> {
        Ok(self.take(32)?.try_into().unwrap())
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
