//! Small decoder-only transformer: byte embeddings, RMS norm, grouped-query
//! attention with rotary embeddings, SwiGLU feed-forward.

mod config;
mod forward;
pub mod rope;
mod weights;

pub use config::{ConfigHash, ModelConfig};
pub use forward::{
    argmax_label, forward_encode, forward_query, lm_head, log_prob, query_mask, score_label,
    EncodeOutput, KvContext, LayerKv, TokenSequence,
};
pub use rope::rope_rotate;
pub use weights::{ModelWeights, WEIGHTS_MAGIC, WEIGHTS_VERSION};

pub(crate) use weights::ByteReader;
