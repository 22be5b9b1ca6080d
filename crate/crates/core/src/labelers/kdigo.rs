//! KDIGO staging of acute kidney injury from creatinine, urine output and
//! renal replacement therapy.

use super::{check_sorted, hourly_onset_labels, Horizon, LabelError, LabelSeries, TaskId, TaskLabels, MINUTES_PER_HOUR};

pub const DEFAULT_WEIGHT_KG: f64 = 75.0;

const HOUR: i64 = MINUTES_PER_HOUR;
const BASELINE_WINDOW: i64 = 7 * 24 * HOUR;
const RISE_WINDOW: i64 = 48 * HOUR;
const MAX_URINE_GAP: i64 = 24 * HOUR;
// Absorbs representation error at threshold boundaries such as 1.3 - 1.0.
const EPS: f64 = 1e-9;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KdigoInputs {
    /// `(minute, mg/dL)`, strictly increasing in time.
    pub creatinine: Vec<(i64, f64)>,
    /// `(minute, mL)`, strictly increasing in time.
    pub urine: Vec<(i64, f64)>,
    pub weight: Option<f64>,
    /// Minutes at which renal replacement therapy was recorded; empty when the
    /// dataset does not provide the concept.
    pub rrt: Vec<i64>,
}

impl KdigoInputs {
    pub fn validate(&self) -> Result<(), LabelError> {
        check_sorted(&self.creatinine, "creatinine")?;
        check_sorted(&self.urine, "urine")?;
        if let Some(&(_, v)) = self.creatinine.iter().find(|(_, v)| !(*v > 0.0)) {
            return Err(LabelError::NonPositiveCreatinine(v));
        }
        if let Some(&(_, v)) = self.urine.iter().find(|(_, v)| *v < 0.0) {
            return Err(LabelError::NegativeVolume(v));
        }
        Ok(())
    }
}

/// Lowest creatinine in the trailing 7-day window `(t - 7d, t]`.
pub fn compute_baseline_creatinine(series: &[(i64, f64)], t: i64) -> Option<f64> {
    window_min(series, t - BASELINE_WINDOW, t)
}

fn window_min(series: &[(i64, f64)], after: i64, upto: i64) -> Option<f64> {
    series
        .iter()
        .filter(|(time, _)| *time > after && *time <= upto)
        .map(|&(_, v)| v)
        .reduce(f64::min)
}

/// Baseline used by the AKI cohort exclusion: the last measurement before ICU
/// admission if one exists, otherwise the earliest one in the ICU.
pub fn aki_exclusion_baseline(series: &[(i64, f64)]) -> Option<f64> {
    series
        .iter()
        .rev()
        .find(|(t, _)| *t < 0)
        .or_else(|| series.iter().find(|(t, _)| *t >= 0))
        .map(|&(_, v)| v)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UrineRate {
    pub time: i64,
    /// Hours the measured volume is spread over.
    pub hours: f64,
    /// mL/kg/h
    pub rate: f64,
}

impl UrineRate {
    fn covers_from(&self) -> i64 {
        self.time - (self.hours * HOUR as f64).round() as i64
    }
}

/// Converts urine volumes into weight-normalized hourly rates.
///
/// Each volume is divided by the hours since the previous measurement. The
/// first measurement, and any measurement following a gap of more than 24 h,
/// is divided by one hour instead.
pub fn compute_urine_rate(series: &[(i64, f64)], weight: Option<f64>) -> Result<Vec<UrineRate>, LabelError> {
    check_sorted(series, "urine")?;
    let weight = weight.filter(|w| *w > 0.0).unwrap_or(DEFAULT_WEIGHT_KG);
    let mut out = Vec::with_capacity(series.len());
    for (i, &(time, volume)) in series.iter().enumerate() {
        if volume < 0.0 {
            return Err(LabelError::NegativeVolume(volume));
        }
        let gap = if i == 0 { None } else { Some(time - series[i - 1].0) };
        let hours = match gap {
            Some(g) if g <= MAX_URINE_GAP => g as f64 / HOUR as f64,
            _ => 1.0,
        };
        out.push(UrineRate {
            time,
            hours,
            rate: volume / hours / weight,
        });
    }
    Ok(out)
}

/// Stage evaluation over one stay's inputs with urine rates precomputed.
#[derive(Debug, Clone)]
pub struct KdigoEvaluator<'a> {
    inputs: &'a KdigoInputs,
    rates: Vec<UrineRate>,
}

impl<'a> KdigoEvaluator<'a> {
    pub fn new(inputs: &'a KdigoInputs) -> Result<Self, LabelError> {
        inputs.validate()?;
        let rates = compute_urine_rate(&inputs.urine, inputs.weight)?;
        Ok(KdigoEvaluator { inputs, rates })
    }

    /// Creatinine criterion, evaluated at the latest measurement at or before `t`.
    pub fn creatinine_stage(&self, t: i64) -> u8 {
        let series = &self.inputs.creatinine;
        let k = series.partition_point(|(time, _)| *time <= t);
        if k == 0 {
            return 0;
        }
        let (tk, current) = series[k - 1];
        let prior = &series[..k];
        let Some(baseline) = compute_baseline_creatinine(prior, tk) else {
            return 0;
        };
        let low_48h = window_min(prior, tk - RISE_WINDOW, tk).unwrap_or(current);
        let ratio = current / baseline;
        let acute_rise = current - low_48h >= 0.3 - EPS;
        if ratio >= 3.0 - EPS || (current >= 4.0 - EPS && acute_rise) {
            3
        } else if ratio >= 2.0 - EPS {
            2
        } else if ratio >= 1.5 - EPS || acute_rise {
            1
        } else {
            0
        }
    }

    /// Length in minutes of the contiguous run ending at the latest urine
    /// measurement at or before `t` during which every rate satisfies `low`.
    fn low_output_run(&self, t: i64, low: impl Fn(f64) -> bool) -> i64 {
        let k = self.rates.partition_point(|r| r.time <= t);
        if k == 0 {
            return 0;
        }
        let end = self.rates[k - 1].time;
        let mut start = end;
        for i in (0..k).rev() {
            let r = &self.rates[i];
            if r.time != start || !low(r.rate) {
                break;
            }
            start = r.covers_from();
        }
        end - start
    }

    pub fn urine_stage(&self, t: i64) -> u8 {
        let anuria = self.low_output_run(t, |r| r <= 0.0);
        let below_03 = self.low_output_run(t, |r| r < 0.3);
        let below_05 = self.low_output_run(t, |r| r < 0.5);
        if anuria >= 12 * HOUR || below_03 >= 24 * HOUR {
            3
        } else if below_05 >= 12 * HOUR {
            2
        } else if below_05 >= 6 * HOUR {
            1
        } else {
            0
        }
    }

    pub fn rrt_stage(&self, t: i64) -> u8 {
        if self.inputs.rrt.iter().any(|&r| r <= t) {
            3
        } else {
            0
        }
    }

    pub fn stage_at(&self, t: i64) -> u8 {
        self.creatinine_stage(t).max(self.urine_stage(t)).max(self.rrt_stage(t))
    }

    /// Times at which the stage can change, sorted and deduplicated.
    pub fn change_points(&self) -> Vec<i64> {
        let mut times: Vec<i64> = self
            .inputs
            .creatinine
            .iter()
            .map(|c| c.0)
            .chain(self.inputs.urine.iter().map(|u| u.0))
            .chain(self.inputs.rrt.iter().copied())
            .collect();
        times.sort_unstable();
        times.dedup();
        times
    }

    /// First minute with stage >= 1.
    pub fn onset(&self) -> Option<i64> {
        self.change_points().into_iter().find(|&t| self.stage_at(t) >= 1)
    }

    /// Highest stage reached within each hourly bin, including the stage
    /// carried into the bin.
    pub fn hourly_stages(&self, n_hours: usize) -> Vec<u8> {
        let points = self.change_points();
        (0..n_hours as i64)
            .map(|h| {
                let lo = h * HOUR;
                let hi = lo + HOUR;
                let inside = points
                    .iter()
                    .filter(|&&t| t > lo && t < hi)
                    .map(|&t| self.stage_at(t))
                    .max()
                    .unwrap_or(0);
                inside.max(self.stage_at(lo))
            })
            .collect()
    }
}

/// KDIGO stage at minute `t`: the maximum over creatinine, urine output and RRT
/// criteria.
pub fn kdigo_stage(inputs: &KdigoInputs, t: i64) -> Result<u8, LabelError> {
    Ok(KdigoEvaluator::new(inputs)?.stage_at(t))
}

/// Hourly AKI labels; with `ordinal`, the KDIGO stage series itself.
pub fn label_aki(inputs: &KdigoInputs, n_hours: usize, horizon: Horizon, ordinal: bool) -> Result<TaskLabels, LabelError> {
    let eval = KdigoEvaluator::new(inputs)?;
    let onset = eval.onset();
    if ordinal {
        let stages = eval.hourly_stages(n_hours);
        return Ok(TaskLabels {
            task: TaskId::Kdigo,
            labels: LabelSeries::Hourly(stages.into_iter().map(f64::from).collect()),
            onset_time: onset,
        });
    }
    let onset_hour = onset.map(|t| t.div_euclid(HOUR));
    Ok(TaskLabels {
        task: TaskId::Aki,
        labels: LabelSeries::Hourly(hourly_onset_labels(n_hours, onset_hour, horizon)),
        onset_time: onset,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const H: i64 = 60;

    fn creat(points: &[(i64, f64)]) -> KdigoInputs {
        KdigoInputs {
            creatinine: points.to_vec(),
            ..Default::default()
        }
    }

    #[test]
    fn baseline_is_trailing_minimum() {
        let day = 24 * H;
        let s = [(-6 * day, 1.0), (-2 * day, 0.8), (0, 1.5)];
        assert_eq!(compute_baseline_creatinine(&s, 0), Some(0.8));
        assert_eq!(compute_baseline_creatinine(&[(0, 1.2)], 0), Some(1.2));
        assert_eq!(compute_baseline_creatinine(&[], 0), None);
    }

    /// Boundary check against a literal scan of the window definition.
    #[test]
    fn baseline_window_boundary_matches_scan() {
        let t = 20_000;
        let seven_days = 7 * 24 * H;
        let scan = |s: &[(i64, f64)]| {
            let mut best: Option<f64> = None;
            for &(time, v) in s {
                let inside = t - time < seven_days && time <= t;
                if inside {
                    best = Some(best.map_or(v, |b: f64| b.min(v)));
                }
            }
            best
        };
        for offset in [-1, 0, 1] {
            let s = [(t - seven_days + offset, 0.5), (t, 1.0)];
            assert_eq!(compute_baseline_creatinine(&s, t), scan(&s), "offset {offset}");
        }
        // t - 7d - 1 min lies outside the window.
        let s = [(t - seven_days - 1, 0.5), (t, 1.0)];
        assert_eq!(compute_baseline_creatinine(&s, t), Some(1.0));
    }

    #[test]
    fn urine_rates() {
        let r = compute_urine_rate(&[(0, 75.0), (2 * H, 150.0)], Some(75.0)).unwrap();
        assert_eq!(r[0].rate, 1.0);
        assert_eq!(r[1].rate, 1.0);
        let r = compute_urine_rate(&[(0, 60.0)], Some(60.0)).unwrap();
        assert_eq!(r[0].rate, 1.0);
        assert_eq!(r[0].hours, 1.0);
        let r = compute_urine_rate(&[(0, 50.0), (30 * H, 100.0)], None).unwrap();
        assert!((r[1].rate - 100.0 / 75.0).abs() < 1e-12);
        assert_eq!(r[1].hours, 1.0);
        // A gap of exactly 24 h still divides by the gap.
        let r = compute_urine_rate(&[(0, 50.0), (24 * H, 240.0)], Some(10.0)).unwrap();
        assert_eq!(r[1].hours, 24.0);
        assert_eq!(
            compute_urine_rate(&[(0, -1.0)], None),
            Err(LabelError::NegativeVolume(-1.0))
        );
    }

    /// Independent rate oracle: enumerate the gap rules literally.
    #[test]
    fn urine_rate_matches_reference_over_gap_rules() {
        let series: Vec<(i64, f64)> = vec![(10, 30.0), (70, 40.0), (200, 90.0), (200 + 25 * H, 10.0), (200 + 49 * H, 500.0)];
        let rates = compute_urine_rate(&series, Some(80.0)).unwrap();
        let expected = [30.0 / 1.0 / 80.0, 40.0 / 1.0 / 80.0, 90.0 / (130.0 / 60.0) / 80.0, 10.0 / 1.0 / 80.0, 500.0 / 24.0 / 80.0];
        for (r, e) in rates.iter().zip(expected) {
            assert!((r.rate - e).abs() < 1e-12, "{r:?} vs {e}");
        }
    }

    #[test]
    fn creatinine_ratio_stages() {
        for (current, stage) in [(1.49, 0), (1.5, 1), (1.6, 1), (1.99, 1), (2.0, 2), (2.5, 2), (2.99, 2), (3.0, 3)] {
            // Baseline 3 days back, outside the 48 h rise window.
            let inputs = creat(&[(0, 1.0), (72 * H, current)]);
            assert_eq!(kdigo_stage(&inputs, 72 * H).unwrap(), stage, "current {current}");
        }
    }

    #[test]
    fn acute_rise_stages() {
        let inputs = creat(&[(0, 1.0), (24 * H, 1.3)]);
        assert_eq!(kdigo_stage(&inputs, 24 * H).unwrap(), 1);
        let inputs = creat(&[(0, 1.0), (24 * H, 1.29)]);
        assert_eq!(kdigo_stage(&inputs, 24 * H).unwrap(), 0);
        // Rise measured outside 48 h does not count.
        let inputs = creat(&[(0, 1.0), (49 * H, 1.3)]);
        assert_eq!(kdigo_stage(&inputs, 49 * H).unwrap(), 0);
        // >= 4.0 with a qualifying rise is stage 3 even below 3x baseline.
        let inputs = creat(&[(-120 * H, 3.0), (0, 3.8), (24 * H, 4.2)]);
        assert_eq!(kdigo_stage(&inputs, 24 * H).unwrap(), 3);
    }

    #[test]
    fn sustained_oliguria_is_stage_one() {
        let mut urine = vec![(0, 75.0)];
        for h in 1..=8 {
            urine.push((h * H, 0.4 * 75.0));
        }
        let inputs = KdigoInputs {
            creatinine: vec![(0, 1.0)],
            urine,
            weight: Some(75.0),
            rrt: vec![],
        };
        // Each 0.4 mL/kg/h measurement covers the hour before it.
        assert_eq!(kdigo_stage(&inputs, 5 * H).unwrap(), 0);
        assert_eq!(kdigo_stage(&inputs, 6 * H).unwrap(), 1);
        assert_eq!(kdigo_stage(&inputs, 8 * H).unwrap(), 1);
    }

    #[test]
    fn rrt_is_stage_three_only_when_present() {
        let mut inputs = creat(&[(0, 1.0)]);
        assert_eq!(kdigo_stage(&inputs, 10 * H).unwrap(), 0);
        inputs.rrt = vec![5 * H];
        assert_eq!(kdigo_stage(&inputs, 4 * H).unwrap(), 0);
        assert_eq!(kdigo_stage(&inputs, 5 * H).unwrap(), 3);
    }

    /// Onset equals a brute-force minute-by-minute scan of the stage.
    #[test]
    fn onset_matches_brute_force_scan() {
        let mut creatinine = vec![];
        for h in (0..30).step_by(6) {
            creatinine.push((h * H + 5, 1.0));
        }
        creatinine.push((30 * H + 17, 2.1));
        let inputs = creat(&creatinine);
        let eval = KdigoEvaluator::new(&inputs).unwrap();
        let scan = (-60..40 * H).find(|&t| eval.stage_at(t) >= 1);
        assert_eq!(eval.onset(), scan);
        assert_eq!(eval.onset().map(|t| t / H), Some(30));
        let labels = label_aki(&inputs, 48, Horizon::Window { hours: 6 }, false).unwrap();
        let LabelSeries::Hourly(l) = &labels.labels else { panic!() };
        assert_eq!(l.len(), 30);
        assert_eq!(l.iter().filter(|&&x| x == 1.0).count(), 6);
    }

    #[test]
    fn flat_inputs_never_onset() {
        let inputs = KdigoInputs {
            creatinine: (0..10).map(|i| (i * 6 * H, 1.0)).collect(),
            urine: (1..60).map(|i| (i * H, 60.0)).collect(),
            weight: Some(80.0),
            rrt: vec![],
        };
        let labels = label_aki(&inputs, 60, Horizon::default(), false).unwrap();
        assert_eq!(labels.onset_time, None);
        assert_eq!(labels.labels, LabelSeries::Hourly(vec![0.0; 60]));
    }

    #[test]
    fn ordinal_mode_returns_stage_series() {
        let inputs = creat(&[(0, 1.0), (3 * H + 10, 1.6), (5 * H, 2.2)]);
        let labels = label_aki(&inputs, 7, Horizon::default(), true).unwrap();
        assert_eq!(labels.task, TaskId::Kdigo);
        assert_eq!(
            labels.labels,
            LabelSeries::Hourly(vec![0.0, 0.0, 0.0, 1.0, 1.0, 2.0, 2.0])
        );
    }

    #[test]
    fn exclusion_baseline_prefers_pre_icu_value() {
        assert_eq!(aki_exclusion_baseline(&[(-300, 4.5), (-10, 1.1), (60, 5.0)]), Some(1.1));
        assert_eq!(aki_exclusion_baseline(&[(60, 4.2), (120, 1.0)]), Some(4.2));
        assert_eq!(aki_exclusion_baseline(&[]), None);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn stage_monotone_in_current_creatinine(
                base in 0.3f64..3.0,
                history in proptest::collection::vec(0.3f64..3.0, 0..5),
                cur in 0.3f64..8.0,
                bump in 0.0f64..3.0,
                oliguric in proptest::bool::ANY,
            ) {
                let mut creatinine = vec![(0, base)];
                for (i, v) in history.iter().enumerate() {
                    creatinine.push(((i as i64 + 1) * 10 * H, *v));
                }
                let t = (history.len() as i64 + 1) * 10 * H;
                let urine: Vec<(i64, f64)> = (1..=t / H).map(|h| (h * H, if oliguric { 10.0 } else { 100.0 })).collect();
                let mk = |c: f64| {
                    let mut cr = creatinine.clone();
                    cr.push((t, c));
                    KdigoInputs { creatinine: cr, urine: urine.clone(), weight: Some(70.0), rrt: vec![] }
                };
                let lo = mk(cur);
                let hi = mk(cur + bump);
                prop_assert!(kdigo_stage(&hi, t).unwrap() >= kdigo_stage(&lo, t).unwrap());
                let eval = KdigoEvaluator::new(&lo).unwrap();
                prop_assert_eq!(
                    eval.stage_at(t),
                    eval.creatinine_stage(t).max(eval.urine_stage(t)).max(eval.rrt_stage(t))
                );
            }

            #[test]
            fn onset_shifts_with_time(shift in -2000i64..2000, rise_at in 1i64..100) {
                let inputs = creat(&[(0, 1.0), (rise_at * H, 2.0)]);
                let moved = KdigoInputs {
                    creatinine: inputs.creatinine.iter().map(|&(t, v)| (t + shift, v)).collect(),
                    ..Default::default()
                };
                let a = KdigoEvaluator::new(&inputs).unwrap().onset().unwrap();
                let b = KdigoEvaluator::new(&moved).unwrap().onset().unwrap();
                prop_assert_eq!(b - a, shift);
            }
        }
    }
}
