//! Harmonized ICU cohort extraction, endpoint labeling, leakage-safe
//! preprocessing and classical-model benchmarking.

pub mod frame;
pub mod harmonize;
pub mod cohort;
pub mod labelers;
pub mod recipes;
pub mod models;
pub mod metrics;
pub mod tuner;
pub mod synthgen;
pub mod experiment;
