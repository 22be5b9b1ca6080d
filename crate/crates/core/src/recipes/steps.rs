use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{resample_aggregate, RecipeData, RecipeError};
use crate::frame::{ColumnData, Frame};
use crate::harmonize::Aggregate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HistStat {
    Min,
    Max,
    Mean,
    Count,
}

impl HistStat {
    pub const ALL: [HistStat; 4] = [HistStat::Min, HistStat::Max, HistStat::Mean, HistStat::Count];

    fn suffix(self) -> &'static str {
        match self {
            HistStat::Min => "min_hist",
            HistStat::Max => "max_hist",
            HistStat::Mean => "mean_hist",
            HistStat::Count => "count_hist",
        }
    }
}

/// A preprocessing step. `columns: None` selects every predictor present when
/// the step is fitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case", deny_unknown_fields)]
pub enum Step {
    Scale {
        #[serde(default)]
        columns: Option<Vec<String>>,
    },
    MissingIndicator {
        #[serde(default)]
        columns: Option<Vec<String>>,
    },
    ForwardFill {
        #[serde(default)]
        columns: Option<Vec<String>>,
    },
    MeanImpute {
        #[serde(default)]
        columns: Option<Vec<String>>,
    },
    HistAggregate {
        #[serde(default)]
        columns: Option<Vec<String>>,
        stats: Vec<HistStat>,
    },
    Resample {
        width: i64,
        #[serde(default)]
        aggregates: BTreeMap<String, Aggregate>,
    },
}

/// A step together with what it learned from the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum FittedStep {
    Scale {
        columns: Vec<String>,
        mean: Vec<f64>,
        std: Vec<f64>,
    },
    MissingIndicator {
        columns: Vec<String>,
    },
    ForwardFill {
        columns: Vec<String>,
    },
    MeanImpute {
        columns: Vec<String>,
        means: Vec<f64>,
    },
    HistAggregate {
        columns: Vec<String>,
        stats: Vec<HistStat>,
    },
    Resample {
        width: i64,
        aggregates: BTreeMap<String, Aggregate>,
    },
}

impl Step {
    fn name(&self) -> &'static str {
        match self {
            Step::Scale { .. } => "scale",
            Step::MissingIndicator { .. } => "missing_indicator",
            Step::ForwardFill { .. } => "forward_fill",
            Step::MeanImpute { .. } => "mean_impute",
            Step::HistAggregate { .. } => "hist_aggregate",
            Step::Resample { .. } => "resample",
        }
    }

    fn resolve(&self, columns: &Option<Vec<String>>, data: &RecipeData) -> Result<Vec<String>, RecipeError> {
        match columns {
            None => Ok(data.predictors.clone()),
            Some(cols) => {
                if let Some(c) = cols.iter().find(|c| !data.predictors.contains(c)) {
                    return Err(RecipeError::UnknownColumn {
                        step: self.name(),
                        column: c.clone(),
                    });
                }
                Ok(cols.clone())
            }
        }
    }

    pub fn fit(&self, data: &RecipeData) -> Result<FittedStep, RecipeError> {
        Ok(match self {
            Step::Scale { columns } => {
                let columns = self.resolve(columns, data)?;
                let mut mean = Vec::with_capacity(columns.len());
                let mut std = Vec::with_capacity(columns.len());
                for c in &columns {
                    let (m, s) = mean_std(data.frame.float(c)?);
                    mean.push(m);
                    std.push(s);
                }
                FittedStep::Scale { columns, mean, std }
            }
            Step::MissingIndicator { columns } => FittedStep::MissingIndicator {
                columns: self.resolve(columns, data)?,
            },
            Step::ForwardFill { columns } => FittedStep::ForwardFill {
                columns: self.resolve(columns, data)?,
            },
            Step::MeanImpute { columns } => {
                let columns = self.resolve(columns, data)?;
                let means = columns
                    .iter()
                    .map(|c| Ok(observed_mean(data.frame.float(c)?).unwrap_or(0.0)))
                    .collect::<Result<_, RecipeError>>()?;
                FittedStep::MeanImpute { columns, means }
            }
            Step::HistAggregate { columns, stats } => FittedStep::HistAggregate {
                columns: self.resolve(columns, data)?,
                stats: stats.clone(),
            },
            Step::Resample { width, aggregates } => {
                if *width <= 0 {
                    return Err(RecipeError::BadWidth(*width));
                }
                FittedStep::Resample {
                    width: *width,
                    aggregates: aggregates.clone(),
                }
            }
        })
    }
}

fn observed_mean(values: &[Option<f64>]) -> Option<f64> {
    let (sum, n) = values.iter().flatten().fold((0.0, 0usize), |(s, n), &v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Population mean and standard deviation of the observed values; a zero or
/// undefined deviation is replaced by 1.
fn mean_std(values: &[Option<f64>]) -> (f64, f64) {
    let Some(mean) = observed_mean(values) else {
        return (0.0, 1.0);
    };
    let (ss, n) = values
        .iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), &v| (s + (v - mean) * (v - mean), n + 1));
    let std = (ss / n as f64).sqrt();
    (mean, if std > 0.0 && std.is_finite() { std } else { 1.0 })
}

fn check_present(data: &RecipeData, columns: &[String]) -> Result<(), RecipeError> {
    match columns.iter().find(|c| !data.frame.has(c)) {
        Some(c) => Err(RecipeError::UnseenColumn(c.clone())),
        None => Ok(()),
    }
}

fn add_predictor(data: &mut RecipeData, name: String, values: Vec<Option<f64>>) -> Result<(), RecipeError> {
    data.frame.set(&name, ColumnData::Float(values))?;
    if !data.predictors.contains(&name) {
        data.predictors.push(name);
    }
    Ok(())
}

impl FittedStep {
    pub fn apply(&self, mut data: RecipeData) -> Result<RecipeData, RecipeError> {
        match self {
            FittedStep::Scale { columns, mean, std } => {
                check_present(&data, columns)?;
                for (j, c) in columns.iter().enumerate() {
                    for x in data.frame.float_mut(c)?.iter_mut().flatten() {
                        *x = (*x - mean[j]) / std[j];
                    }
                }
            }
            FittedStep::MissingIndicator { columns } => {
                check_present(&data, columns)?;
                for c in columns {
                    let mask = data
                        .frame
                        .float(c)?
                        .iter()
                        .map(|x| Some(if x.is_none() { 1.0 } else { 0.0 }))
                        .collect();
                    add_predictor(&mut data, format!("{c}_missing"), mask)?;
                }
            }
            FittedStep::ForwardFill { columns } => {
                check_present(&data, columns)?;
                let stays = data.stays();
                for c in columns {
                    let col = data.frame.float_mut(c)?;
                    for (_, range) in &stays {
                        let mut last = None;
                        for x in &mut col[range.clone()] {
                            match x {
                                Some(v) => last = Some(*v),
                                None => *x = last,
                            }
                        }
                    }
                }
            }
            FittedStep::MeanImpute { columns, means } => {
                check_present(&data, columns)?;
                for (j, c) in columns.iter().enumerate() {
                    for x in data.frame.float_mut(c)?.iter_mut() {
                        x.get_or_insert(means[j]);
                    }
                }
            }
            FittedStep::HistAggregate { columns, stats } => {
                check_present(&data, columns)?;
                let stays = data.stays();
                for c in columns {
                    let col = data.frame.float(c)?.to_vec();
                    let mut out: Vec<Vec<Option<f64>>> = vec![Vec::with_capacity(col.len()); stats.len()];
                    for (_, range) in &stays {
                        let (mut lo, mut hi, mut sum, mut n) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
                        for x in &col[range.clone()] {
                            if let Some(v) = *x {
                                lo = lo.min(v);
                                hi = hi.max(v);
                                sum += v;
                                n += 1;
                            }
                            for (k, s) in stats.iter().enumerate() {
                                out[k].push(match s {
                                    HistStat::Count => Some(n as f64),
                                    _ if n == 0 => None,
                                    HistStat::Min => Some(lo),
                                    HistStat::Max => Some(hi),
                                    HistStat::Mean => Some(sum / n as f64),
                                });
                            }
                        }
                    }
                    for (k, s) in stats.iter().enumerate() {
                        add_predictor(&mut data, format!("{c}_{}", s.suffix()), std::mem::take(&mut out[k]))?;
                    }
                }
            }
            FittedStep::Resample { width, aggregates } => {
                data = resample(&data, *width, aggregates)?;
            }
        }
        Ok(data)
    }
}

fn resample(
    data: &RecipeData,
    width: i64,
    aggregates: &BTreeMap<String, Aggregate>,
) -> Result<RecipeData, RecipeError> {
    let Some(seq) = data.sequence.clone() else {
        return Ok(data.clone());
    };
    let ids = data.ids();
    let times = data.frame.int(&seq)?;
    let cols: Vec<&[Option<f64>]> = data
        .predictors
        .iter()
        .map(|p| data.frame.float(p))
        .collect::<Result<_, _>>()?;
    let mut out_ids = Vec::new();
    let mut out_times = Vec::new();
    let mut out_cols: Vec<Vec<Option<f64>>> = vec![Vec::new(); cols.len()];
    let mut i = 0;
    while i < ids.len() {
        let bucket = times[i].div_euclid(width);
        let mut j = i;
        while j < ids.len() && ids[j] == ids[i] && times[j].div_euclid(width) == bucket {
            j += 1;
        }
        out_ids.push(ids[i]);
        out_times.push(bucket);
        for (k, c) in cols.iter().enumerate() {
            let vals: Vec<f64> = c[i..j].iter().flatten().copied().collect();
            let agg = resample_aggregate(aggregates, &data.predictors[k]);
            out_cols[k].push((!vals.is_empty()).then(|| agg.apply(&vals)));
        }
        i = j;
    }
    let mut frame = Frame::new();
    frame.push(data.group.as_str(), ColumnData::Int(out_ids))?;
    frame.push(seq.as_str(), ColumnData::Int(out_times))?;
    for (p, c) in data.predictors.iter().zip(out_cols) {
        frame.push(p.as_str(), ColumnData::Float(c))?;
    }
    Ok(RecipeData {
        frame,
        group: data.group.clone(),
        sequence: Some(seq),
        predictors: data.predictors.clone(),
    })
}
