use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tokenizer::MIN_VOCAB;

/// Shape of a decoder-only transformer with grouped-query attention and
/// rotary position embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f32,
    pub norm_eps: f32,
    pub max_seq_len: usize,
    /// Reuse the embedding matrix as the output projection.
    #[serde(default)]
    pub tied_lm_head: bool,
}

fn default_rope_theta() -> f32 {
    10000.0
}

impl ModelConfig {
    /// A small shape suitable for desk-scale experiments and tests.
    pub fn tiny() -> Self {
        Self {
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            n_kv_heads: 2,
            head_dim: 8,
            ffn_dim: 64,
            vocab_size: MIN_VOCAB,
            rope_theta: 10000.0,
            norm_eps: 1e-5,
            max_seq_len: 16384,
            tied_lm_head: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("head_dim", self.head_dim),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.rope_theta > 0.0) || !(self.norm_eps > 0.0) {
            return Err(Error::Config("rope_theta and norm_eps must be positive".into()));
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads {} is not a multiple of n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            )));
        }
        if self.d_model != self.n_heads * self.head_dim {
            return Err(Error::Config(format!(
                "d_model {} != n_heads {} * head_dim {}",
                self.d_model, self.n_heads, self.head_dim
            )));
        }
        if self.head_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "head_dim {} must be even for rotary embeddings",
                self.head_dim
            )));
        }
        Ok(())
    }

    /// Query heads sharing each key/value head.
    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    pub fn hash(&self) -> ConfigHash {
        // Field order is fixed by the struct, so the JSON is canonical.
        let json = serde_json::to_vec(self).expect("config serializes");
        ConfigHash(Sha256::digest(&json).into())
    }
}

/// SHA-256 of the canonical JSON form of a [`ModelConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConfigHash(pub [u8; 32]);

impl fmt::Display for ConfigHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}
