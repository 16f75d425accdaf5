//! Table ingestion: CSV parsing, equal-frequency discretization, per-field
//! vocabularies and the temporal retrieval/train/test split.

mod cache;
mod discretize;
mod ingest;
mod schema;
mod split;
mod vocab;

use thiserror::Error;

pub use cache::{content_hash, decode_cache, encode_cache, load_or_ingest, ContentHash};
pub use discretize::{discretize, BinEdges};
pub use ingest::{ingest_csv, read_csv, RawRow, RawTable};
pub use schema::{FieldKind, FieldSpec, Schema};
pub use split::{temporal_split, PoolSplit, SplitFractions};
pub use vocab::{FieldEncoder, Vocabulary, OOV};

use crate::codec::DecodeError;

#[derive(Debug, Error, PartialEq)]
pub enum TabularError {
    #[error("schema error: missing column {0:?}")]
    MissingColumn(String),
    #[error("line {line}: {message}")]
    Row { line: usize, message: String },
    #[error("input has no data rows")]
    Empty,
    #[error("csv: {0}")]
    Csv(String),
    #[error("config: {0}")]
    Config(String),
    #[error("discretize: {0}")]
    Discretize(String),
    #[error("split: {0}")]
    Split(String),
    #[error("expected {expected} values, found {found}")]
    Arity { expected: usize, found: usize },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("table cache: {0}")]
    Decode(#[from] DecodeError),
}

/// One encoded data instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Row {
    pub row_id: usize,
    pub timestamp: i64,
    /// Vocabulary codes, one per feature field.
    pub values: Vec<u32>,
    pub label: u8,
}

/// Encoded rows indexed by `row_id`, with the schema and vocabulary used to
/// encode them.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub schema: Schema,
    pub vocab: Vocabulary,
    pub rows: Vec<Row>,
}

impl Table {
    pub fn row(&self, row_id: usize) -> &Row {
        &self.rows[row_id]
    }

    pub fn num_fields(&self) -> usize {
        self.schema.num_fields()
    }

    pub fn rows_of<'a>(&'a self, ids: &'a [usize]) -> impl Iterator<Item = &'a Row> + 'a {
        ids.iter().map(move |&id| &self.rows[id])
    }
}

/// An encoded table together with its pool assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub table: Table,
    pub split: PoolSplit,
    pub fractions: SplitFractions,
}
