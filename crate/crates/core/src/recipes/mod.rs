//! Preprocessing recipes: an ordered list of steps that learn their statistics
//! on a training split and can then be applied to any split.

mod steps;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::CohortBundle;
use crate::frame::{ColumnData, Frame, FrameError};
use crate::harmonize::Aggregate;

pub use steps::{FittedStep, HistStat, Step};

#[derive(Debug, Error, PartialEq)]
pub enum RecipeError {
    #[error("recipe step `{step}` references column `{column}` that has no predictor role")]
    UnknownColumn { step: &'static str, column: String },
    #[error("column `{0}` seen at fit time is missing from the data")]
    UnseenColumn(String),
    #[error("resample width must be positive, got {0}")]
    BadWidth(i64),
    #[error(transparent)]
    Frame(#[from] FrameError),
}

/// A table with its role assignment. Rows are kept sorted by group, then
/// sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct RecipeData {
    pub frame: Frame,
    pub group: String,
    pub sequence: Option<String>,
    pub predictors: Vec<String>,
}

impl RecipeData {
    pub fn new(frame: Frame, group: &str, sequence: Option<&str>, predictors: Vec<String>) -> Result<Self, RecipeError> {
        let mut keys = vec![group];
        keys.extend(sequence);
        let frame = frame.sort_by_keys(&keys)?;
        for p in &predictors {
            frame.float(p)?;
        }
        Ok(RecipeData {
            frame,
            group: group.to_string(),
            sequence: sequence.map(String::from),
            predictors,
        })
    }

    /// Dynamic rows with the static columns of their stay appended.
    pub fn from_bundle(bundle: &CohortBundle) -> Result<Self, RecipeError> {
        let v = &bundle.vars;
        let sta_ids = bundle.statics.int(&v.group)?;
        let row_of: HashMap<i64, usize> = sta_ids.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        let dyn_ids = bundle.dynamic.int(&v.group)?;
        let mut frame = bundle.dynamic.clone();
        for s in &v.statics {
            let col = bundle.statics.float(s)?;
            let joined = dyn_ids.iter().map(|id| row_of.get(id).and_then(|&r| col[r])).collect();
            frame.push(s.as_str(), ColumnData::Float(joined))?;
        }
        let predictors = v.dynamic.iter().chain(&v.statics).cloned().collect();
        RecipeData::new(frame, &v.group, Some(&v.sequence), predictors)
    }

    pub fn ids(&self) -> &[i64] {
        self.frame.int(&self.group).expect("group column is validated")
    }

    pub fn times(&self) -> Option<&[i64]> {
        self.sequence.as_deref().map(|s| self.frame.int(s).expect("sequence column is validated"))
    }

    /// Row ranges per stay.
    pub fn stays(&self) -> Vec<(i64, std::ops::Range<usize>)> {
        self.frame.group_ranges(&self.group).expect("group column is validated")
    }

    /// Keeps only rows of the given stays.
    pub fn filter_stays(&self, keep: impl Fn(i64) -> bool) -> RecipeData {
        RecipeData {
            frame: self.frame.filter_by_key(&self.group, keep).expect("group column is validated"),
            ..self.clone()
        }
    }

    /// Predictor matrix in row-major order; missing cells become NaN.
    pub fn matrix(&self) -> Vec<Vec<f64>> {
        let cols: Vec<&[Option<f64>]> = self
            .predictors
            .iter()
            .map(|p| self.frame.float(p).expect("predictors are float columns"))
            .collect();
        (0..self.frame.n_rows())
            .map(|i| cols.iter().map(|c| c[i].unwrap_or(f64::NAN)).collect())
            .collect()
    }

    pub fn missing_predictor_cells(&self) -> usize {
        self.predictors
            .iter()
            .map(|p| self.frame.float(p).map_or(0, |c| c.iter().filter(|x| x.is_none()).count()))
            .sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub steps: Vec<Step>,
}

impl Recipe {
    pub fn new(steps: Vec<Step>) -> Self {
        Recipe { steps }
    }

    /// Scaling, expanding-window history of the dynamic features, missing
    /// indicators, forward fill and train-mean imputation.
    pub fn default_chain(dynamic: &[String], statics: &[String]) -> Self {
        let originals: Vec<String> = dynamic.iter().chain(statics).cloned().collect();
        Recipe::new(vec![
            Step::Scale { columns: None },
            Step::HistAggregate {
                columns: Some(dynamic.to_vec()),
                stats: HistStat::ALL.to_vec(),
            },
            Step::MissingIndicator {
                columns: Some(originals),
            },
            Step::ForwardFill { columns: None },
            Step::MeanImpute { columns: None },
        ])
    }

    /// Fits every step on the output of the steps before it.
    pub fn fit(&self, train: &RecipeData) -> Result<FittedRecipe, RecipeError> {
        let mut data = train.clone();
        let mut fitted = Vec::with_capacity(self.steps.len());
        for step in &self.steps {
            let f = step.fit(&data)?;
            data = f.apply(data)?;
            fitted.push(f);
        }
        Ok(FittedRecipe { steps: fitted })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("recipe serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedRecipe {
    pub steps: Vec<FittedStep>,
}

impl FittedRecipe {
    pub fn apply(&self, data: &RecipeData) -> Result<RecipeData, RecipeError> {
        let mut out = data.clone();
        for s in &self.steps {
            out = s.apply(out)?;
        }
        Ok(out)
    }

    /// Undoes every scaling step on the columns it touched.
    pub fn inverse_scale(&self, data: &RecipeData) -> Result<RecipeData, RecipeError> {
        let mut out = data.clone();
        for s in self.steps.iter().rev() {
            if let FittedStep::Scale { columns, mean, std } = s {
                for (j, c) in columns.iter().enumerate() {
                    for x in out.frame.float_mut(c)?.iter_mut().flatten() {
                        *x = *x * std[j] + mean[j];
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Per-column aggregate used when resampling, falling back to the mean.
pub fn resample_aggregate(aggregates: &std::collections::BTreeMap<String, Aggregate>, column: &str) -> Aggregate {
    aggregates.get(column).copied().unwrap_or(Aggregate::Mean)
}

#[cfg(test)]
mod tests;
