//! Sepsis-3 onset: organ dysfunction (SOFA rise) around suspected infection.

use serde::{Deserialize, Serialize};

use super::{hourly_onset_labels, Horizon, LabelError, LabelSeries, TaskId, TaskLabels, MINUTES_PER_HOUR};

const HOUR: i64 = MINUTES_PER_HOUR;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuspicionMode {
    /// Antibiotics and a body-fluid culture within the pairing windows.
    AbxAndCulture,
    /// Antibiotics alone, for datasets without microbiology.
    AbxOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SepsisDefinition {
    pub sofa_delta: f64,
    pub sofa_lookback_hours: i64,
    pub window_before_hours: i64,
    pub window_after_hours: i64,
    pub culture_after_abx_max_hours: i64,
    pub abx_after_culture_max_hours: i64,
    /// Days of continuous antibiotics required; 0 disables the requirement.
    pub abx_continuity_days: i64,
    pub suspicion_mode: SuspicionMode,
}

impl Default for SepsisDefinition {
    fn default() -> Self {
        SepsisDefinition {
            sofa_delta: 2.0,
            sofa_lookback_hours: 24,
            window_before_hours: 48,
            window_after_hours: 24,
            culture_after_abx_max_hours: 24,
            abx_after_culture_max_hours: 72,
            abx_continuity_days: 3,
            suspicion_mode: SuspicionMode::AbxAndCulture,
        }
    }
}

impl SepsisDefinition {
    /// The variant without a treatment-duration requirement.
    pub fn without_continuity(self) -> Self {
        SepsisDefinition {
            abx_continuity_days: 0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let windows = [
            self.sofa_lookback_hours,
            self.window_before_hours,
            self.window_after_hours,
            self.culture_after_abx_max_hours,
            self.abx_after_culture_max_hours,
            self.abx_continuity_days,
        ];
        if windows.iter().any(|&w| w < 0) || !(self.sofa_delta >= 0.0) {
            return Err("sepsis definition windows must be non-negative".into());
        }
        Ok(())
    }
}

/// An antibiotic administration (`end == None`) or a prescription interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbxCourse {
    pub start: i64,
    pub end: Option<i64>,
}

impl AbxCourse {
    pub fn dose(at: i64) -> Self {
        AbxCourse { start: at, end: None }
    }

    fn covered_until(&self) -> i64 {
        self.end.unwrap_or(self.start).max(self.start)
    }
}

/// Antibiotic starts that are followed by continuous treatment.
///
/// Treatment starting at `a` is continuous when administrations recur with
/// gaps of at most 24 h for the required number of days, or until death, or
/// when a prescription in the chain runs until the end of the stay.
pub fn antibiotic_continuity(
    abx: &[AbxCourse],
    end_of_stay: i64,
    death_time: Option<i64>,
    def: &SepsisDefinition,
) -> Vec<i64> {
    let mut courses = abx.to_vec();
    courses.sort_by_key(|c| (c.start, c.end));
    let mut starts: Vec<i64> = courses.iter().map(|c| c.start).collect();
    starts.dedup();
    if def.abx_continuity_days == 0 {
        return starts;
    }
    let required = def.abx_continuity_days * 24 * HOUR;
    let max_gap = 24 * HOUR;
    starts
        .into_iter()
        .filter(|&a| {
            let mut covered = a;
            let mut prescribed_to_end = false;
            for c in courses.iter().filter(|c| c.start >= a) {
                if c.start - covered > max_gap {
                    break;
                }
                covered = covered.max(c.covered_until());
                if c.end.is_some_and(|e| e >= end_of_stay) {
                    prescribed_to_end = true;
                }
            }
            let until_death = death_time.is_some_and(|d| d >= a && d < a + required && d - covered <= max_gap);
            covered - a >= required || until_death || prescribed_to_end
        })
        .collect()
}

/// Times of suspected infection from qualifying antibiotic starts and culture
/// draws, sorted and deduplicated.
pub fn detect_suspicion(abx_starts: &[i64], cultures: &[i64], def: &SepsisDefinition) -> Vec<i64> {
    let mut out = Vec::new();
    match def.suspicion_mode {
        SuspicionMode::AbxOnly => out.extend_from_slice(abx_starts),
        SuspicionMode::AbxAndCulture => {
            let culture_after = def.culture_after_abx_max_hours * HOUR;
            let abx_after = def.abx_after_culture_max_hours * HOUR;
            for &a in abx_starts {
                for &c in cultures {
                    if c >= a && c - a <= culture_after {
                        out.push(a);
                    } else if a >= c && a - c <= abx_after {
                        out.push(c);
                    }
                }
            }
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Hourly SOFA: the maximum per bin, forward-filled; bins before the first
/// measurement stay missing.
pub fn sofa_hourly(events: &[(i64, f64)], n_hours: usize) -> Vec<Option<f64>> {
    let mut bins: Vec<Option<f64>> = vec![None; n_hours];
    for &(t, v) in events {
        let h = t.div_euclid(HOUR);
        if h >= 0 && (h as usize) < n_hours {
            let slot = &mut bins[h as usize];
            *slot = Some(slot.map_or(v, |x: f64| x.max(v)));
        }
    }
    let mut last = None;
    for b in bins.iter_mut() {
        match b {
            Some(v) => last = Some(*v),
            None => *b = last,
        }
    }
    bins
}

/// Hours at which SOFA exceeds its trailing-window minimum by the required delta.
pub fn dysfunction_hours(sofa: &[Option<f64>], def: &SepsisDefinition) -> Vec<i64> {
    let lookback = def.sofa_lookback_hours.max(1) as usize;
    (0..sofa.len())
        .filter(|&h| {
            let Some(now) = sofa[h] else { return false };
            let lo = (h + 1).saturating_sub(lookback);
            let min = sofa[lo..=h].iter().flatten().copied().fold(f64::INFINITY, f64::min);
            now - min >= def.sofa_delta
        })
        .map(|h| h as i64)
        .collect()
}

/// Earliest dysfunction hour lying within the closed window around any
/// suspicion time.
pub fn sepsis_onset_hour(dysfunction: &[i64], suspicions: &[i64], def: &SepsisDefinition) -> Option<i64> {
    dysfunction.iter().copied().find(|&h| {
        suspicions.iter().any(|&s| {
            let sh = s.div_euclid(HOUR);
            h >= sh - def.window_before_hours && h <= sh + def.window_after_hours
        })
    })
}

/// Per-stay inputs for sepsis labeling.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SepsisInputs {
    /// `(minute, SOFA)`; `None` when the dataset lacks the concept.
    pub sofa: Option<Vec<(i64, f64)>>,
    pub abx: Vec<AbxCourse>,
    pub cultures: Vec<i64>,
    pub end_of_stay: i64,
    pub death_time: Option<i64>,
}

pub fn label_sepsis(
    inputs: &SepsisInputs,
    n_hours: usize,
    def: &SepsisDefinition,
    horizon: Horizon,
) -> Result<TaskLabels, LabelError> {
    let sofa_events = inputs.sofa.as_ref().ok_or(LabelError::MissingSofa)?;
    let sofa = sofa_hourly(sofa_events, n_hours);
    let dysfunction = dysfunction_hours(&sofa, def);
    let starts = antibiotic_continuity(&inputs.abx, inputs.end_of_stay, inputs.death_time, def);
    let suspicions = detect_suspicion(&starts, &inputs.cultures, def);
    let onset = sepsis_onset_hour(&dysfunction, &suspicions, def);
    Ok(TaskLabels {
        task: TaskId::Sepsis,
        labels: LabelSeries::Hourly(hourly_onset_labels(n_hours, onset, horizon)),
        onset_time: onset.map(|h| h * HOUR),
    })
}
