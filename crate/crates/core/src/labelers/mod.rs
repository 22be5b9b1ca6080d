//! Endpoint definitions for the five prediction tasks.
//!
//! All functions are pure and operate on one stay at a time. Times are minutes
//! relative to ICU admission unless a name says otherwise; hourly label series
//! are indexed by bin `h` covering `[60h, 60h + 60)`.

mod kdigo;
mod outcomes;
mod sepsis;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use kdigo::{
    aki_exclusion_baseline, compute_baseline_creatinine, compute_urine_rate, kdigo_stage, label_aki, KdigoEvaluator,
    KdigoInputs, UrineRate, DEFAULT_WEIGHT_KG,
};
pub use outcomes::{label_kidney_function, label_mortality, label_remaining_los, median, LOS_CAP_HOURS};
pub use sepsis::{
    antibiotic_continuity, detect_suspicion, dysfunction_hours, label_sepsis, sepsis_onset_hour, sofa_hourly,
    AbxCourse, SepsisDefinition, SepsisInputs, SuspicionMode,
};

pub const MINUTES_PER_HOUR: i64 = 60;

#[derive(Debug, Error, PartialEq)]
pub enum LabelError {
    #[error("negative urine volume {0} mL")]
    NegativeVolume(f64),
    #[error("creatinine must be positive, got {0}")]
    NonPositiveCreatinine(f64),
    #[error("{0} series is not strictly sorted by time")]
    Unsorted(&'static str),
    #[error("death flag missing for stay {0} and the dataset does not declare complete mortality recording")]
    MissingDeathFlag(i64),
    #[error("sepsis task unavailable: no SOFA concept")]
    MissingSofa,
    #[error("unknown task `{0}` (expected one of mortality, aki, kdigo, sepsis, kf, los)")]
    UnknownTask(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    Mortality,
    Aki,
    /// Ordinal KDIGO stage instead of binary AKI.
    Kdigo,
    Sepsis,
    KidneyFunction,
    Los,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    Classification,
    Regression,
}

impl TaskId {
    pub fn mode(self) -> TaskMode {
        match self {
            TaskId::Mortality | TaskId::Aki | TaskId::Sepsis => TaskMode::Classification,
            TaskId::Kdigo | TaskId::KidneyFunction | TaskId::Los => TaskMode::Regression,
        }
    }

    /// Whether the task has one label per stay (observation window 0-24 h).
    pub fn once_per_stay(self) -> bool {
        matches!(self, TaskId::Mortality | TaskId::KidneyFunction)
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Mortality => "mortality",
            TaskId::Aki => "aki",
            TaskId::Kdigo => "kdigo",
            TaskId::Sepsis => "sepsis",
            TaskId::KidneyFunction => "kf",
            TaskId::Los => "los",
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskId {
    type Err = LabelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "mortality" | "mortality24" | "mortality_at_24h" => TaskId::Mortality,
            "aki" => TaskId::Aki,
            "kdigo" => TaskId::Kdigo,
            "sepsis" => TaskId::Sepsis,
            "kf" | "kidney_function" | "kidneyfunction" => TaskId::KidneyFunction,
            "los" | "remaining_los" => TaskId::Los,
            _ => return Err(LabelError::UnknownTask(s.to_string())),
        })
    }
}

/// How far ahead an hourly onset label looks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Horizon {
    /// Hour `h` is positive iff onset falls in `(h, h + hours]`.
    Window { hours: i64 },
    /// Every hour before onset is positive.
    AnyFuture,
}

impl Default for Horizon {
    fn default() -> Self {
        Horizon::Window { hours: 6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSeries {
    Once(f64),
    Hourly(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLabels {
    pub task: TaskId,
    pub labels: LabelSeries,
    /// Event time in minutes since admission, when an event occurred.
    pub onset_time: Option<i64>,
}

impl TaskLabels {
    pub fn onset_hour(&self) -> Option<i64> {
        self.onset_time.map(|t| t.div_euclid(MINUTES_PER_HOUR))
    }

    pub fn is_positive(&self) -> bool {
        match &self.labels {
            LabelSeries::Once(v) => *v > 0.0,
            LabelSeries::Hourly(v) => v.iter().any(|&x| x > 0.0),
        }
    }
}

/// Hourly binary labels for an onset task.
///
/// Without an event, all `n_hours` bins are negative. With an event in hour
/// `onset_hour`, the series is truncated to the bins strictly before it.
pub fn hourly_onset_labels(n_hours: usize, onset_hour: Option<i64>, horizon: Horizon) -> Vec<f64> {
    let Some(onset) = onset_hour else {
        return vec![0.0; n_hours];
    };
    let len = onset.clamp(0, n_hours as i64) as usize;
    (0..len)
        .map(|h| {
            let ahead = onset - h as i64;
            let positive = match horizon {
                Horizon::Window { hours } => ahead > 0 && ahead <= hours,
                Horizon::AnyFuture => ahead > 0,
            };
            if positive {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

pub(crate) fn check_sorted<T>(series: &[(i64, T)], what: &'static str) -> Result<(), LabelError> {
    if series.windows(2).all(|w| w[0].0 < w[1].0) {
        Ok(())
    } else {
        Err(LabelError::Unsorted(what))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_labels_truncate_at_onset() {
        let labels = hourly_onset_labels(20, Some(8), Horizon::Window { hours: 6 });
        assert_eq!(labels, vec![0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let any = hourly_onset_labels(20, Some(3), Horizon::AnyFuture);
        assert_eq!(any, vec![1.0; 3]);
        assert_eq!(hourly_onset_labels(4, None, Horizon::default()), vec![0.0; 4]);
    }

    #[test]
    fn task_names_parse() {
        assert_eq!("mortality24".parse::<TaskId>().unwrap(), TaskId::Mortality);
        assert_eq!("kf".parse::<TaskId>().unwrap(), TaskId::KidneyFunction);
        assert!(matches!("icu_readmission".parse::<TaskId>(), Err(LabelError::UnknownTask(_))));
    }
}
