#![allow(dead_code)]

use dbsa_core::pipeline::{encode_pool, EncodedPool, MethodConfig, TaskSpec};
use dbsa_core::sparse_mask::AttentionPattern;
use dbsa_core::{ModelWeights, Tensor};
use dbsa_oracle::fixtures;

/// 8 blocks x 5 short demos (480 tokens), encoded under `pattern`.
pub fn small_pool(weights: &ModelWeights, pattern: AttentionPattern, seed: u64) -> (TaskSpec, EncodedPool) {
    let task = TaskSpec::new(fixtures::short_demos(40, seed), fixtures::labels()).unwrap();
    let cfg = MethodConfig {
        pattern,
        block_size: 5,
        ..MethodConfig::default()
    };
    let pool = encode_pool(weights, &task, &cfg).unwrap();
    (task, pool)
}

pub fn query_ids(text: &str) -> Vec<u32> {
    dbsa_core::tokenizer::encode(text)
}

/// Max |subject - oracle| over all rows.
pub fn logit_dev(subject: &Tensor, oracle: &[Vec<f64>]) -> f64 {
    dbsa_oracle::compare_rows(subject.data(), oracle.to_vec()).max_abs_dev
}
