//! Dataset-independent clinical concepts and their extraction from raw source tables.
//!
//! A [`ConceptDictionary`] describes what a concept means (unit, plausible range,
//! aggregation) and, per dataset, where to find it. A [`SourceConfig`] describes
//! the tables of one dataset and how its ID systems relate in time. Together they
//! turn raw CSV tables into [`EventTable`]s of stay-relative `(stay, minute, value)`
//! rows.

mod concept;
mod events;
mod extract;
mod raw;
mod source;

pub use concept::{
    parse_concept_dictionary, Aggregate, Callback, ConceptClass, ConceptDef, ConceptDictionary,
    ItemId, SourceItem,
};
pub use events::{Event, EventSet, EventTable, Value};
pub use extract::{extract_concept, extract_many, ExtractStats, Extraction};
pub use raw::{Dataset, RawColumn, RawTable, StayRecord, SOURCE_CONFIG_FILE};
pub use source::{parse_source_config, ColumnSpec, ColumnType, IdLevel, SourceConfig, TableDefaults, TableSpec, TimeUnit};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarmonizeError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("schema error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("duplicate concept `{0}`")]
    DuplicateConcept(String),
    #[error("source config is missing the `{0}` id level")]
    MissingIdLevel(String),
    #[error("dangling reference: {context} refers to column `{column}` absent from table `{table}`")]
    DanglingReference {
        table: String,
        column: String,
        context: String,
    },
    #[error("source config declares no tables")]
    NoTables,
    #[error("concept `{concept}` has no sources for dataset `{dataset}`")]
    DatasetNotInConcept { concept: String, dataset: String },
    #[error("table `{0}` is not loaded")]
    MissingTable(String),
    #[error("concept `{concept}`: non-numeric value `{value}` in `{table}.{column}`")]
    NonNumericValue {
        concept: String,
        table: String,
        column: String,
        value: String,
    },
    #[error("concept `{concept}`: callback `{callback}` is not supported")]
    UnsupportedCallback { concept: String, callback: String },
    #[error("table `{table}`: {message}")]
    Table { table: String, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error in {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

pub(crate) fn classify_json_error(err: serde_path_to_error::Error<serde_json::Error>) -> HarmonizeError {
    let path = err.path().to_string();
    let inner = err.into_inner();
    if inner.is_syntax() || inner.is_eof() {
        HarmonizeError::Parse {
            line: inner.line(),
            column: inner.column(),
            message: inner.to_string(),
        }
    } else {
        HarmonizeError::Schema {
            path,
            message: inner.to_string(),
        }
    }
}
