//! Small deterministic inputs for differential tests. Seeds are fixed so a
//! failing case replays exactly.

use dbsa_core::dataset::Demonstration;
use dbsa_core::{ModelConfig, Rng};

pub const LABELS: [&str; 4] = ["n", "s", "e", "w"];

/// Three model shapes: grouped-query (4 heads over 2), multi-head, and
/// single-KV-head with a tied output layer and a different rotary base.
pub fn configs() -> Vec<(u64, ModelConfig)> {
    let gqa = ModelConfig::tiny();
    let mha = ModelConfig {
        n_kv_heads: 4,
        n_layers: 1,
        ..ModelConfig::tiny()
    };
    let mqa = ModelConfig {
        n_kv_heads: 1,
        head_dim: 4,
        n_heads: 8,
        n_layers: 3,
        rope_theta: 500.0,
        tied_lm_head: true,
        ..ModelConfig::tiny()
    };
    vec![(11, gqa), (23, mha), (37, mqa)]
}

/// `n` demonstrations whose rendered form is 12 bytes
/// (`"Q: ab\\nA: n\\n\\n"`), so 40 of them plus a query stay under 512 tokens.
pub fn short_demos(n: usize, seed: u64) -> Vec<Demonstration> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| {
            let a = (b'a' + rng.below(26) as u8) as char;
            let b = (b'a' + rng.below(26) as u8) as char;
            let label = LABELS[rng.below(LABELS.len())];
            Demonstration::new(format!("{a}{b}"), label)
        })
        .collect()
}

pub fn labels() -> Vec<String> {
    LABELS.iter().map(|s| s.to_string()).collect()
}
