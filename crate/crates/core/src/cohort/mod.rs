//! Hourly stay grids, exclusion criteria with attrition bookkeeping, and the
//! on-disk cohort format.

mod build;
mod bundle;
mod exclusion;
mod grid;

use std::path::PathBuf;

use thiserror::Error;

use crate::frame::FrameError;
use crate::harmonize::HarmonizeError;
use crate::labelers::LabelError;

pub use build::{build_task_cohort, CohortOptions, TaskCohort};
pub use bundle::{read_cohort, write_cohort, CohortBundle, CohortFormat, VarRoles, VARS_FILE};
pub use exclusion::{
    apply_base_exclusions, apply_criteria, apply_task_exclusions, base_criteria, drop_groups_without_positives,
    task_criteria, AttritionReport, AttritionStep, Criterion, StayFacts,
};
pub use grid::{build_stay_grid, encode_value, GridFeature, StaticRecord, StayGrid};

/// Time-varying input concepts, in column order.
pub const DYNAMIC_CONCEPTS: [&str; 48] = [
    "alb", "alp", "alt", "ast", "be", "bicar", "bili", "bili_dir", "bnd", "bun", "ca", "cai", "ck", "ckmb", "cl",
    "crea", "crp", "dbp", "fgn", "fio2", "glu", "hgb", "hr", "inr_pt", "k", "lact", "lymph", "map", "mch", "mchc",
    "mcv", "methb", "mg", "na", "neut", "o2sat", "pco2", "ph", "phos", "plt", "po2", "ptt", "resp", "sbp", "temp",
    "tnt", "urine", "wbc",
];

pub const STATIC_CONCEPTS: [&str; 4] = ["age", "sex", "height", "weight"];

pub const MINUTES_PER_BIN: i64 = 60;

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("cohort directory {dir} has no `{table}` table (looked for {table}.parquet and {table}.csv)")]
    MissingFile { dir: PathBuf, table: &'static str },
    #[error("schema mismatch in {file}: {message}")]
    Schema { file: String, message: String },
    #[error("invalid cohort: {0}")]
    Invalid(String),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Harmonize(#[from] HarmonizeError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Parquet(#[from] parquet::errors::ParquetError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
