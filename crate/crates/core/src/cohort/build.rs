use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::exclusion::{apply_base_exclusions, apply_task_exclusions, AttritionReport, StayFacts};
use super::grid::{build_stay_grid, encode_value, n_bins, GridFeature, StaticRecord, StayGrid};
use super::{CohortBundle, CohortError, VarRoles, DYNAMIC_CONCEPTS, STATIC_CONCEPTS};
use crate::frame::{ColumnData, Frame};
use crate::harmonize::{extract_many, ConceptDictionary, Dataset, EventSet, StayRecord};
use crate::labelers::{
    aki_exclusion_baseline, label_aki, label_kidney_function, label_mortality, label_remaining_los, label_sepsis,
    AbxCourse, Horizon, KdigoInputs, LabelError, LabelSeries, SepsisDefinition, SepsisInputs, TaskId, TaskLabels,
};

/// Concepts consumed by the labelers.
pub const CREATININE: &str = "crea";
pub const URINE: &str = "urine";
pub const DEATH: &str = "death";
pub const SOFA: &str = "sofa";
pub const ANTIBIOTICS: &str = "abx";
/// Antibiotic prescriptions; the value is the duration in minutes.
pub const ANTIBIOTIC_DURATION: &str = "abx_dur";
pub const CULTURES: &str = "samp";
pub const RRT: &str = "rrt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortOptions {
    pub dynamic: Vec<String>,
    /// Age, sex, height and weight concepts, in that order.
    pub statics: [String; 4],
    pub horizon: Horizon,
    pub sepsis: SepsisDefinition,
    /// Treat a missing death flag as survival.
    pub complete_mortality_recording: bool,
    /// Hours of data used by once-per-stay tasks.
    pub observation_hours: usize,
}

impl Default for CohortOptions {
    fn default() -> Self {
        CohortOptions {
            dynamic: DYNAMIC_CONCEPTS.iter().map(|s| s.to_string()).collect(),
            statics: STATIC_CONCEPTS.map(String::from),
            horizon: Horizon::default(),
            sepsis: SepsisDefinition::default(),
            complete_mortality_recording: false,
            observation_hours: 24,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaskCohort {
    pub task: TaskId,
    pub bundle: CohortBundle,
    pub base_attrition: AttritionReport,
    pub task_attrition: AttritionReport,
    /// Labels of every stay that passed the base criteria.
    pub labels: BTreeMap<i64, TaskLabels>,
    /// Exclusion facts of every stay, with the task fields filled in for
    /// stays that passed the base criteria.
    pub facts: Vec<StayFacts>,
}

impl TaskCohort {
    pub fn attrition(&self) -> AttritionReport {
        let mut r = self.base_attrition.clone();
        r.append(self.task_attrition.clone());
        r
    }
}

fn positive_times(events: &EventSet, concept: &str, stay: i64) -> Vec<i64> {
    events
        .get(concept)
        .map(|t| t.series(stay).into_iter().filter(|&(_, v)| v > 0.0).map(|(t, _)| t).collect())
        .unwrap_or_default()
}

fn series(events: &EventSet, concept: &str, stay: i64) -> Vec<(i64, f64)> {
    events.get(concept).map(|t| t.series(stay)).unwrap_or_default()
}

struct StayContext<'a> {
    events: &'a EventSet,
    opts: &'a CohortOptions,
    has_sofa: bool,
}

impl StayContext<'_> {
    fn statics(&self, dict: &ConceptDictionary, stay: i64) -> StaticRecord {
        let get = |name: &str| {
            let table = self.events.get(name)?;
            let levels = dict.get(name).and_then(|d| d.levels.as_deref());
            table.stay(stay).iter().find_map(|e| encode_value(&e.value, levels))
        };
        let s = &self.opts.statics;
        StaticRecord {
            age: get(&s[0]),
            sex: get(&s[1]),
            height: get(&s[2]),
            weight: get(&s[3]),
        }
    }

    fn death(&self, stay: i64) -> (Option<bool>, Option<i64>) {
        let rows = series(self.events, DEATH, stay);
        if rows.is_empty() {
            return (None, None);
        }
        let time = rows.iter().find(|(_, v)| *v > 0.0).map(|(t, _)| *t);
        (Some(time.is_some()), time)
    }

    fn labels(
        &self,
        task: TaskId,
        stay: &StayRecord,
        statics: &StaticRecord,
        facts: &mut StayFacts,
    ) -> Result<TaskLabels, LabelError> {
        let id = stay.stay_id;
        let los = facts.los_minutes.unwrap_or(0);
        let hours = n_bins(los);
        let in_stay = |s: Vec<(i64, f64)>| -> Vec<(i64, f64)> { s.into_iter().filter(|(t, _)| *t < los).collect() };
        match task {
            TaskId::Mortality => {
                let (died, _) = self.death(id);
                label_mortality(died, self.opts.complete_mortality_recording, id)
            }
            TaskId::Aki | TaskId::Kdigo => {
                let creatinine = in_stay(series(self.events, CREATININE, id));
                facts.aki_baseline = aki_exclusion_baseline(&creatinine);
                let inputs = KdigoInputs {
                    creatinine,
                    urine: in_stay(series(self.events, URINE, id)),
                    weight: statics.weight,
                    rrt: positive_times(self.events, RRT, id).into_iter().filter(|&t| t < los).collect(),
                };
                let labels = label_aki(&inputs, hours, self.opts.horizon, task == TaskId::Kdigo)?;
                facts.onset_time = labels.onset_time;
                Ok(labels)
            }
            TaskId::Sepsis => {
                if !self.has_sofa {
                    return Err(LabelError::MissingSofa);
                }
                let mut abx: Vec<AbxCourse> = series(self.events, ANTIBIOTICS, id)
                    .into_iter()
                    .filter(|&(_, v)| v > 0.0)
                    .map(|(t, _)| AbxCourse::dose(t))
                    .collect();
                abx.extend(series(self.events, ANTIBIOTIC_DURATION, id).into_iter().map(|(t, d)| AbxCourse {
                    start: t,
                    end: Some(t + d.round() as i64),
                }));
                let inputs = SepsisInputs {
                    sofa: Some(in_stay(series(self.events, SOFA, id))),
                    abx,
                    cultures: positive_times(self.events, CULTURES, id),
                    end_of_stay: los,
                    death_time: self.death(id).1,
                };
                let labels = label_sepsis(&inputs, hours, &self.opts.sepsis, self.opts.horizon)?;
                facts.onset_time = labels.onset_time;
                Ok(labels)
            }
            TaskId::KidneyFunction => {
                let kf = label_kidney_function(&series(self.events, CREATININE, id));
                facts.has_day2_creatinine = kf.is_some();
                Ok(TaskLabels {
                    task,
                    labels: LabelSeries::Once(kf.unwrap_or(f64::NAN)),
                    onset_time: None,
                })
            }
            TaskId::Los => Ok(TaskLabels {
                task,
                labels: LabelSeries::Hourly(label_remaining_los(los)),
                onset_time: None,
            }),
        }
    }
}

struct StayRow {
    stay: StayRecord,
    statics: StaticRecord,
    grid: StayGrid,
    facts: StayFacts,
}

/// Extracts, grids, labels and filters one task cohort from a raw dataset.
pub fn build_task_cohort(
    ds: &Dataset,
    dict: &ConceptDictionary,
    dataset: &str,
    task: TaskId,
    opts: &CohortOptions,
) -> Result<TaskCohort, CohortError> {
    opts.sepsis.validate().map_err(CohortError::Invalid)?;
    let available = |name: &str| dict.get(name).is_some_and(|d| d.sources.contains_key(dataset));
    for name in opts.dynamic.iter().chain(opts.statics.iter()) {
        if dict.get(name).is_none() {
            return Err(CohortError::Invalid(format!("concept `{name}` is not in the dictionary")));
        }
    }
    let mut wanted: Vec<&str> = opts.dynamic.iter().chain(opts.statics.iter()).map(String::as_str).collect();
    wanted.extend([CREATININE, URINE, DEATH, SOFA, ANTIBIOTICS, ANTIBIOTIC_DURATION, CULTURES, RRT]);
    let mut seen = HashSet::new();
    wanted.retain(|n| available(n) && seen.insert(*n));
    let (events, _) = extract_many(ds, dict, &wanted, dataset)?;

    let features: Vec<GridFeature> = opts
        .dynamic
        .iter()
        .map(|n| GridFeature::from_def(n, dict.get(n).expect("checked above")))
        .collect();
    let ctx = StayContext {
        events: &events,
        opts,
        has_sofa: available(SOFA),
    };

    let rows: Vec<StayRow> = ds
        .stays()?
        .into_par_iter()
        .map(|stay| {
            let statics = ctx.statics(dict, stay.stay_id);
            let los = stay.los_minutes();
            let grid = build_stay_grid(&events, &features, stay.stay_id, los.unwrap_or(0));
            let facts = StayFacts {
                stay_id: stay.stay_id,
                age: statics.age,
                los_minutes: los,
                observed_bins: grid.observed_bins(),
                longest_gap: grid.longest_gap(),
                ..Default::default()
            };
            StayRow {
                stay,
                statics,
                grid,
                facts,
            }
        })
        .collect();
    let all_facts: Vec<StayFacts> = rows.iter().map(|r| r.facts.clone()).collect();
    let (base_kept, base_attrition) = apply_base_exclusions(&all_facts);
    let base_kept: HashSet<i64> = base_kept.into_iter().collect();

    let labelled: Vec<(usize, StayFacts, TaskLabels)> = rows
        .par_iter()
        .enumerate()
        .filter(|(_, r)| base_kept.contains(&r.stay.stay_id))
        .map(|(i, r)| {
            let mut facts = r.facts.clone();
            let labels = ctx.labels(task, &r.stay, &r.statics, &mut facts)?;
            Ok((i, facts, labels))
        })
        .collect::<Result<_, LabelError>>()?;
    let task_facts: Vec<StayFacts> = labelled.iter().map(|(_, f, _)| f.clone()).collect();
    let mut facts = all_facts;
    for (i, f, _) in &labelled {
        facts[*i] = f.clone();
    }
    let (final_ids, task_attrition) = apply_task_exclusions(task, &task_facts);
    let final_ids: HashSet<i64> = final_ids.into_iter().collect();

    let mut sta = TableBuilder::new(&STATIC_CONCEPTS.map(String::from), false);
    let mut dy = TableBuilder::new(&opts.dynamic, true);
    let mut outc = TableBuilder::new(&["label".to_string()], !task.once_per_stay());
    let mut labels = BTreeMap::new();
    for (i, _, lab) in labelled {
        let r = &rows[i];
        let id = r.stay.stay_id;
        if final_ids.contains(&id) {
            sta.push(id, None, r.statics.values().to_vec());
            let n_dyn = match &lab.labels {
                LabelSeries::Once(v) => {
                    outc.push(id, None, vec![Some(*v)]);
                    opts.observation_hours.min(r.grid.n_bins)
                }
                LabelSeries::Hourly(v) => {
                    for (h, &y) in v.iter().enumerate() {
                        outc.push(id, Some(h as i64), vec![Some(y)]);
                    }
                    v.len().min(r.grid.n_bins)
                }
            };
            for h in 0..n_dyn {
                dy.push(id, Some(h as i64), r.grid.values.iter().map(|f| f[h]).collect());
            }
        }
        labels.insert(id, lab);
    }
    let vars = VarRoles::new(opts.dynamic.clone(), STATIC_CONCEPTS.map(String::from).to_vec());
    let bundle = CohortBundle::new(sta.finish(&vars)?, dy.finish(&vars)?, outc.finish(&vars)?, vars)?;
    Ok(TaskCohort {
        task,
        bundle,
        base_attrition,
        task_attrition,
        labels,
        facts,
    })
}

/// Row-wise accumulator for a cohort table.
struct TableBuilder {
    names: Vec<String>,
    timed: bool,
    ids: Vec<i64>,
    times: Vec<i64>,
    cols: Vec<Vec<Option<f64>>>,
}

impl TableBuilder {
    fn new(names: &[String], timed: bool) -> Self {
        TableBuilder {
            names: names.to_vec(),
            timed,
            ids: Vec::new(),
            times: Vec::new(),
            cols: vec![Vec::new(); names.len()],
        }
    }

    fn push(&mut self, id: i64, time: Option<i64>, values: Vec<Option<f64>>) {
        self.ids.push(id);
        if let Some(t) = time {
            self.times.push(t);
        }
        for (c, v) in self.cols.iter_mut().zip(values) {
            c.push(v);
        }
    }

    fn finish(self, vars: &VarRoles) -> Result<Frame, CohortError> {
        let mut f = Frame::new();
        f.push(vars.group.as_str(), ColumnData::Int(self.ids))?;
        if self.timed {
            f.push(vars.sequence.as_str(), ColumnData::Int(self.times))?;
        }
        for (n, c) in self.names.into_iter().zip(self.cols) {
            f.push(n, ColumnData::Float(c))?;
        }
        Ok(f)
    }
}
