use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::labelers::TaskId;

const HOUR: i64 = 60;

/// Everything the exclusion criteria look at for one stay.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StayFacts {
    pub stay_id: i64,
    pub age: Option<f64>,
    /// `None` when admission or discharge time is missing.
    pub los_minutes: Option<i64>,
    pub observed_bins: usize,
    pub longest_gap: usize,
    /// Event onset in minutes since admission for onset tasks.
    pub onset_time: Option<i64>,
    pub aki_baseline: Option<f64>,
    pub has_day2_creatinine: bool,
}

/// A named per-stay predicate; `accept` returns true for stays that are kept.
#[derive(Clone)]
pub struct Criterion {
    pub name: String,
    accept: Arc<dyn Fn(&StayFacts) -> bool + Send + Sync>,
}

impl Criterion {
    pub fn new(name: impl Into<String>, accept: impl Fn(&StayFacts) -> bool + Send + Sync + 'static) -> Self {
        Criterion {
            name: name.into(),
            accept: Arc::new(accept),
        }
    }

    pub fn accepts(&self, facts: &StayFacts) -> bool {
        (self.accept)(facts)
    }
}

impl fmt::Debug for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Criterion").field("name", &self.name).finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttritionStep {
    pub criterion: String,
    pub n_before: usize,
    pub n_excluded: usize,
    pub n_after: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttritionReport {
    pub steps: Vec<AttritionStep>,
}

impl AttritionReport {
    pub fn push(&mut self, criterion: &str, n_before: usize, n_excluded: usize) {
        self.steps.push(AttritionStep {
            criterion: criterion.to_string(),
            n_before,
            n_excluded,
            n_after: n_before - n_excluded,
        });
    }

    pub fn append(&mut self, other: AttritionReport) {
        self.steps.extend(other.steps);
    }

    pub fn step(&self, criterion: &str) -> Option<&AttritionStep> {
        self.steps.iter().find(|s| s.criterion == criterion)
    }

    /// Whether each step conserves counts and chains onto the previous one.
    pub fn is_consistent(&self) -> bool {
        self.steps.iter().all(|s| s.n_after + s.n_excluded == s.n_before)
            && self.steps.windows(2).all(|w| w[0].n_after == w[1].n_before)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("attrition report serializes")
    }
}

/// The five cohort-wide criteria in their canonical order.
pub fn base_criteria() -> Vec<Criterion> {
    vec![
        Criterion::new("age_under_18", |f| f.age.is_some_and(|a| a >= 18.0)),
        Criterion::new("missing_discharge", |f| f.los_minutes.is_some_and(|l| l >= 0)),
        Criterion::new("los_under_6h", |f| f.los_minutes.is_some_and(|l| l >= 6 * HOUR)),
        Criterion::new("fewer_than_4_bins", |f| f.observed_bins >= 4),
        Criterion::new("gap_over_12h", |f| f.longest_gap <= 12),
    ]
}

fn no_early_onset(f: &StayFacts) -> bool {
    f.onset_time.map_or(true, |t| t >= 6 * HOUR)
}

pub fn task_criteria(task: TaskId) -> Vec<Criterion> {
    match task {
        TaskId::Mortality => vec![Criterion::new("los_under_30h", |f| {
            f.los_minutes.is_some_and(|l| l >= 30 * HOUR)
        })],
        TaskId::KidneyFunction => vec![
            Criterion::new("los_under_48h", |f| f.los_minutes.is_some_and(|l| l >= 48 * HOUR)),
            Criterion::new("no_day2_creatinine", |f| f.has_day2_creatinine),
        ],
        TaskId::Aki | TaskId::Kdigo => vec![
            Criterion::new("onset_before_6h", no_early_onset),
            Criterion::new("baseline_creatinine_over_4", |f| f.aki_baseline.map_or(true, |b| b <= 4.0)),
        ],
        TaskId::Sepsis => vec![Criterion::new("onset_before_6h", no_early_onset)],
        TaskId::Los => Vec::new(),
    }
}

/// Applies criteria in order. Returns the kept stay ids, in input order.
pub fn apply_criteria(facts: &[StayFacts], criteria: &[Criterion]) -> (Vec<i64>, AttritionReport) {
    let accepted: Vec<Vec<bool>> = facts
        .par_iter()
        .map(|f| criteria.iter().map(|c| c.accepts(f)).collect())
        .collect();
    let mut alive = vec![true; facts.len()];
    let mut report = AttritionReport::default();
    let mut n = facts.len();
    for (ci, c) in criteria.iter().enumerate() {
        let mut excluded = 0;
        for (i, a) in alive.iter_mut().enumerate() {
            if *a && !accepted[i][ci] {
                *a = false;
                excluded += 1;
            }
        }
        report.push(&c.name, n, excluded);
        n -= excluded;
    }
    let kept = facts.iter().zip(&alive).filter(|(_, &a)| a).map(|(f, _)| f.stay_id).collect();
    (kept, report)
}

pub fn apply_base_exclusions(facts: &[StayFacts]) -> (Vec<i64>, AttritionReport) {
    apply_criteria(facts, &base_criteria())
}

pub fn apply_task_exclusions(task: TaskId, facts: &[StayFacts]) -> (Vec<i64>, AttritionReport) {
    apply_criteria(facts, &task_criteria(task))
}

/// Drops every stay whose group (e.g. hospital) has no positive stay at all.
pub fn drop_groups_without_positives(
    stays: &[i64],
    group_of: &HashMap<i64, i64>,
    positive: &HashSet<i64>,
    report: &mut AttritionReport,
) -> Vec<i64> {
    let mut has_positive: BTreeMap<i64, bool> = BTreeMap::new();
    for s in stays {
        if let Some(&g) = group_of.get(s) {
            *has_positive.entry(g).or_default() |= positive.contains(s);
        }
    }
    let kept: Vec<i64> = stays
        .iter()
        .copied()
        .filter(|s| group_of.get(s).map_or(true, |g| has_positive[g]))
        .collect();
    report.push("group_without_positives", stays.len(), stays.len() - kept.len());
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ok_stay(id: i64) -> StayFacts {
        StayFacts {
            stay_id: id,
            age: Some(60.0),
            los_minutes: Some(48 * HOUR),
            observed_bins: 40,
            longest_gap: 2,
            onset_time: None,
            aki_baseline: Some(1.0),
            has_day2_creatinine: true,
        }
    }

    #[test]
    fn base_examples() {
        let young = StayFacts { age: Some(17.5), ..ok_stay(1) };
        let short = StayFacts { los_minutes: Some(5 * HOUR), ..ok_stay(2) };
        let sparse = StayFacts { observed_bins: 3, ..ok_stay(3) };
        let gappy = StayFacts { longest_gap: 13, ..ok_stay(4) };
        let gap12 = StayFacts { longest_gap: 12, ..ok_stay(5) };
        let open = StayFacts { los_minutes: None, ..ok_stay(6) };
        let facts = vec![young, short, sparse, gappy, gap12, open];
        let (kept, report) = apply_base_exclusions(&facts);
        assert_eq!(kept, vec![5]);
        let excluded: Vec<usize> = report.steps.iter().map(|s| s.n_excluded).collect();
        assert_eq!(excluded, vec![1, 1, 1, 1, 1]);
        assert!(report.is_consistent());
        assert_eq!(report.steps[0].n_before, 6);
    }

    #[test]
    fn task_examples() {
        let mort = StayFacts { los_minutes: Some(28 * HOUR), ..ok_stay(1) };
        assert!(apply_task_exclusions(TaskId::Mortality, std::slice::from_ref(&mort)).0.is_empty());
        let early = StayFacts { onset_time: Some(3 * HOUR), ..ok_stay(2) };
        assert!(apply_task_exclusions(TaskId::Aki, std::slice::from_ref(&early)).0.is_empty());
        let pre_icu = StayFacts { onset_time: Some(-30), ..ok_stay(3) };
        assert!(apply_task_exclusions(TaskId::Sepsis, &[pre_icu]).0.is_empty());
        let renal = StayFacts { aki_baseline: Some(4.2), ..ok_stay(4) };
        assert!(apply_task_exclusions(TaskId::Aki, &[renal]).0.is_empty());
        let (kept, report) = apply_task_exclusions(TaskId::Los, &[mort, early]);
        assert_eq!(kept, vec![1, 2]);
        assert!(report.steps.is_empty());
        let no_crea = StayFacts { has_day2_creatinine: false, ..ok_stay(5) };
        assert!(apply_task_exclusions(TaskId::KidneyFunction, &[no_crea]).0.is_empty());
    }

    #[test]
    fn final_set_is_order_invariant() {
        use rand::seq::SliceRandom;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let facts: Vec<StayFacts> = (0..300)
            .map(|i| StayFacts {
                stay_id: i,
                age: if rng.gen_bool(0.05) { None } else { Some(rng.gen_range(10.0..90.0)) },
                los_minutes: if rng.gen_bool(0.05) { None } else { Some(rng.gen_range(0..5000)) },
                observed_bins: rng.gen_range(0..10),
                longest_gap: rng.gen_range(0..20),
                ..Default::default()
            })
            .collect();
        let mut criteria = base_criteria();
        let (reference, _) = apply_criteria(&facts, &criteria);
        for _ in 0..10 {
            criteria.shuffle(&mut rng);
            let (kept, report) = apply_criteria(&facts, &criteria);
            assert_eq!(kept, reference);
            assert!(report.is_consistent());
        }
    }

    #[test]
    fn groups_without_positive_are_dropped() {
        let group_of: HashMap<i64, i64> = [(1, 10), (2, 10), (3, 20), (4, 20)].into_iter().collect();
        let positive: HashSet<i64> = [2].into_iter().collect();
        let mut report = AttritionReport::default();
        let kept = drop_groups_without_positives(&[1, 2, 3, 4], &group_of, &positive, &mut report);
        assert_eq!(kept, vec![1, 2]);
        assert_eq!(report.steps[0].n_excluded, 2);
    }

    #[test]
    fn report_serializes_as_list() {
        let mut r = AttritionReport::default();
        r.push("age_under_18", 10, 2);
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v[0]["criterion"], "age_under_18");
        assert_eq!(v[0]["n_after"], 8);
    }
}
