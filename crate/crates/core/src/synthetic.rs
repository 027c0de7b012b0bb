//! Synthetic associative-recall classification tasks.
//!
//! Every demonstration query contains one key word among filler words; the
//! answer is the label bound to that key. Test queries reuse keys seen in the
//! pool, so the answer can be copied from a retrieved demonstration.

use crate::dataset::Demonstration;
use crate::tensor::Rng;

const LABELS: [&str; 8] = [
    "north", "south", "east", "west", "red", "green", "blue", "gold",
];
const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub pool: Vec<Demonstration>,
    pub tests: Vec<Demonstration>,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub pool_size: usize,
    pub test_size: usize,
    pub n_labels: usize,
    pub n_keys: usize,
    pub filler_words: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            pool_size: 100,
            test_size: 20,
            n_labels: 4,
            n_keys: 24,
            filler_words: 2,
            seed: 0,
        }
    }
}

fn word(rng: &mut Rng, syllables: usize) -> String {
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(CONSONANTS[rng.below(CONSONANTS.len())] as char);
        w.push(VOWELS[rng.below(VOWELS.len())] as char);
    }
    w
}

pub fn associative_recall(spec: SyntheticSpec) -> SyntheticTask {
    let n_labels = spec.n_labels.clamp(1, LABELS.len());
    let labels: Vec<String> = LABELS[..n_labels].iter().map(|s| s.to_string()).collect();
    let mut rng = Rng::new(spec.seed);
    let mut keys: Vec<String> = Vec::with_capacity(spec.n_keys);
    while keys.len() < spec.n_keys.max(1) {
        let k = word(&mut rng, 3);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let binding: Vec<usize> = (0..keys.len()).map(|_| rng.below(n_labels)).collect();
    let make = |rng: &mut Rng, key: usize| {
        let mut words: Vec<String> = (0..spec.filler_words).map(|_| word(rng, 2)).collect();
        let at = rng.below(words.len() + 1);
        words.insert(at, keys[key].clone());
        Demonstration::new(words.join(" "), labels[binding[key]].clone())
    };
    let pool_keys: Vec<usize> = (0..spec.pool_size).map(|_| rng.below(keys.len())).collect();
    let pool: Vec<Demonstration> = pool_keys.iter().map(|&k| make(&mut rng, k)).collect();
    let tests = (0..spec.test_size)
        .map(|_| {
            // reuse the key of a random pool demonstration so it is recallable
            let key = if pool_keys.is_empty() {
                rng.below(keys.len())
            } else {
                pool_keys[rng.below(pool_keys.len())]
            };
            make(&mut rng, key)
        })
        .collect();
    SyntheticTask {
        pool,
        tests,
        labels,
    }
}
