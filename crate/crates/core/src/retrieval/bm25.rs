use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Granularity;
use crate::error::{Error, Result};
use crate::kv_store::Unit;

/// Lowercase, split on runs of non-alphanumeric characters, drop empties.
pub fn bm25_tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

/// One retrievable document and where its tokens live in the cache.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexDoc {
    pub unit: Unit,
    /// Block holding the unit.
    pub block: usize,
    /// Position of the unit in encoded (pool) order.
    pub rank: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DocStats {
    unit: Unit,
    block: usize,
    rank: usize,
    len: usize,
    tf: BTreeMap<String, u32>,
}

/// Okapi BM25 index over blocks or demonstrations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bm25Index {
    params: Bm25Params,
    granularity: Granularity,
    docs: Vec<DocStats>,
    df: BTreeMap<String, usize>,
    avgdl: f64,
}

impl Bm25Index {
    pub fn build(docs: Vec<IndexDoc>, granularity: Granularity, params: Bm25Params) -> Result<Self> {
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        let mut stats = Vec::with_capacity(docs.len());
        for d in docs {
            let matches = match (granularity, d.unit) {
                (Granularity::Block, Unit::Block(_)) | (Granularity::Example, Unit::Example(_)) => true,
                _ => false,
            };
            if !matches {
                return Err(Error::Invalid(format!(
                    "unit {} does not match {granularity:?} granularity",
                    d.unit
                )));
            }
            let terms = bm25_tokenize(&d.text);
            let mut tf = BTreeMap::new();
            for t in &terms {
                *tf.entry(t.clone()).or_insert(0) += 1;
            }
            for t in tf.keys() {
                *df.entry(t.clone()).or_insert(0) += 1;
            }
            stats.push(DocStats {
                unit: d.unit,
                block: d.block,
                rank: d.rank,
                len: terms.len(),
                tf,
            });
        }
        let avgdl = if stats.is_empty() {
            0.0
        } else {
            stats.iter().map(|d| d.len as f64).sum::<f64>() / stats.len() as f64
        };
        Ok(Self {
            params,
            granularity,
            docs: stats,
            df,
            avgdl,
        })
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.df.get(term).copied().unwrap_or(0)
    }

    pub fn unit(&self, doc: usize) -> Unit {
        self.docs[doc].unit
    }

    pub fn block_of(&self, doc: usize) -> usize {
        self.docs[doc].block
    }

    pub fn rank(&self, doc: usize) -> usize {
        self.docs[doc].rank
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.docs.len() as f64;
        let df = self.doc_freq(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    pub fn bm25_score(&self, query_terms: &[String], doc: usize) -> f64 {
        let d = &self.docs[doc];
        let Bm25Params { k1, b } = self.params;
        let mut score = 0.0;
        for term in query_terms {
            let Some(&tf) = d.tf.get(term) else { continue };
            let tf = tf as f64;
            let norm = 1.0 - b + b * d.len as f64 / self.avgdl;
            score += self.idf(term) * tf * (k1 + 1.0) / (tf + k1 * norm);
        }
        score
    }

    pub fn score_all(&self, query_terms: &[String]) -> Vec<f64> {
        (0..self.docs.len())
            .map(|d| self.bm25_score(query_terms, d))
            .collect()
    }

    /// Write the index as a JSON sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}
