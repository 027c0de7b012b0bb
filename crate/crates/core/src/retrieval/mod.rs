//! BM25 retrieval over blocks or demonstrations, block grouping strategies,
//! anchor-pinned selection and ordering.

mod bm25;
mod grouping;
mod selection;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bm25::{bm25_tokenize, Bm25Index, Bm25Params, IndexDoc};
pub use grouping::{
    bm25_distance_matrix, displaced, diversify, group, BlockPartition, GroupingStrategy,
    DEFAULT_SWAP_FRACTION,
};
pub use selection::{
    budget, order, select, select_plain, OrderingStrategy, SelectedUnit, Selection, DEFAULT_RATIO,
};

/// What a retrieval unit is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    #[default]
    Block,
    Example,
}

impl Granularity {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "block" => Ok(Self::Block),
            "example" => Ok(Self::Example),
            other => Err(Error::Invalid(format!("unknown granularity {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Block => "block",
            Self::Example => "example",
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
