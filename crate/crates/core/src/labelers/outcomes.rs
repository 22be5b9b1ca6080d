//! Once-per-stay and regression endpoints.

use super::{LabelError, LabelSeries, TaskId, TaskLabels, MINUTES_PER_HOUR};

/// Remaining length of stay is capped at seven days.
pub const LOS_CAP_HOURS: f64 = 168.0;

const KF_WINDOW: (i64, i64) = (24 * MINUTES_PER_HOUR, 48 * MINUTES_PER_HOUR);

/// ICU mortality. A missing flag means survival only when the dataset records
/// every ICU death.
pub fn label_mortality(died: Option<bool>, complete_recording: bool, stay_id: i64) -> Result<TaskLabels, LabelError> {
    let died = match died {
        Some(d) => d,
        None if complete_recording => false,
        None => return Err(LabelError::MissingDeathFlag(stay_id)),
    };
    Ok(TaskLabels {
        task: TaskId::Mortality,
        labels: LabelSeries::Once(if died { 1.0 } else { 0.0 }),
        onset_time: None,
    })
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

/// Median creatinine over the second day, `[24 h, 48 h)`.
pub fn label_kidney_function(creatinine: &[(i64, f64)]) -> Option<f64> {
    let day2: Vec<f64> = creatinine
        .iter()
        .filter(|(t, _)| (KF_WINDOW.0..KF_WINDOW.1).contains(t))
        .map(|&(_, v)| v)
        .collect();
    median(&day2)
}

/// Hours until discharge at the start of each hourly bin.
pub fn label_remaining_los(los_minutes: i64) -> Vec<f64> {
    let los_minutes = los_minutes.max(0);
    let n = (los_minutes + MINUTES_PER_HOUR - 1) / MINUTES_PER_HOUR;
    let los_hours = los_minutes as f64 / MINUTES_PER_HOUR as f64;
    (0..n).map(|h| (los_hours - h as f64).min(LOS_CAP_HOURS)).collect()
}
