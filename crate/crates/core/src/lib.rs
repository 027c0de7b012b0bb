//! Dynamic block-sparse attention for retrieval-based many-shot in-context
//! learning.
//!
//! A demonstration pool is split into blocks and encoded once under a
//! streaming block-sparse pattern (anchor block, a few preceding blocks,
//! itself). Keys are cached before rotation, so at query time any subset of
//! blocks can be concatenated, re-positioned and rotated into a contiguous
//! cache that the query attends to in full.

pub mod dataset;
pub mod error;
pub mod kv_store;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod retrieval;
pub mod sparse_mask;
pub mod synthetic;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use model::{ConfigHash, KvContext, LayerKv, ModelConfig, ModelWeights, TokenSequence};
pub use tensor::{BoolMatrix, Rng, Tensor};
