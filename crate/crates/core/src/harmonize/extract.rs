use std::collections::HashMap;

use rayon::prelude::*;
use regex::Regex;

use super::concept::{Callback, ConceptClass, ConceptDef, ConceptDictionary, SourceItem};
use super::events::{Event, EventSet, EventTable, Value};
use super::raw::{Dataset, RawColumn};
use super::HarmonizeError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExtractStats {
    pub rows_matched: usize,
    pub dropped_missing: usize,
    pub dropped_out_of_bounds: usize,
    pub dropped_unknown_stay: usize,
    pub collapsed_duplicates: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub events: EventTable,
    pub stats: ExtractStats,
}

/// Admission times of stays, addressable by stay id or by patient id.
struct StayIndex {
    admit_by_stay: HashMap<i64, i64>,
    stays_by_patient: HashMap<i64, Vec<(i64, i64)>>,
}

impl StayIndex {
    fn build(ds: &Dataset) -> Result<StayIndex, HarmonizeError> {
        let mut admit_by_stay = HashMap::new();
        let mut stays_by_patient: HashMap<i64, Vec<(i64, i64)>> = HashMap::new();
        for stay in ds.stays()? {
            let Some(admit) = stay.admit else { continue };
            admit_by_stay.insert(stay.stay_id, admit);
            if let Some(p) = stay.patient_id {
                stays_by_patient.entry(p).or_default().push((stay.stay_id, admit));
            }
        }
        Ok(StayIndex {
            admit_by_stay,
            stays_by_patient,
        })
    }
}

enum Selector<'a> {
    All,
    Ids(&'a RawColumn, &'a [super::ItemId]),
    Pattern(&'a RawColumn, Regex),
}

impl Selector<'_> {
    fn keep(&self, row: usize) -> bool {
        match self {
            Selector::All => true,
            Selector::Ids(col, ids) => col.text(row).is_some_and(|c| ids.iter().any(|id| id.matches(&c))),
            Selector::Pattern(col, re) => col.text(row).is_some_and(|c| re.is_match(&c)),
        }
    }
}

struct Pending {
    stay_id: i64,
    time: i64,
    seq: usize,
    value: Value,
}

/// Extracts one concept for one dataset into a stay-relative event table.
pub fn extract_concept(ds: &Dataset, def: &ConceptDef, dataset: &str) -> Result<Extraction, HarmonizeError> {
    let index = StayIndex::build(ds)?;
    extract_with_index(ds, &index, def, dataset)
}

/// Extracts several concepts concurrently over the same raw tables.
pub fn extract_many(
    ds: &Dataset,
    dict: &ConceptDictionary,
    names: &[&str],
    dataset: &str,
) -> Result<(EventSet, HashMap<String, ExtractStats>), HarmonizeError> {
    let index = StayIndex::build(ds)?;
    let results: Vec<(String, Extraction)> = names
        .par_iter()
        .map(|name| {
            let def = dict.get(name).ok_or_else(|| HarmonizeError::Schema {
                path: (*name).to_string(),
                message: "concept not defined in dictionary".into(),
            })?;
            Ok((name.to_string(), extract_with_index(ds, &index, def, dataset)?))
        })
        .collect::<Result<_, HarmonizeError>>()?;
    let mut events = EventSet::new();
    let mut stats = HashMap::new();
    for (name, ex) in results {
        stats.insert(name.clone(), ex.stats);
        events.insert(name, ex.events);
    }
    Ok((events, stats))
}

fn extract_with_index(
    ds: &Dataset,
    index: &StayIndex,
    def: &ConceptDef,
    dataset: &str,
) -> Result<Extraction, HarmonizeError> {
    let items = def
        .sources
        .get(dataset)
        .ok_or_else(|| HarmonizeError::DatasetNotInConcept {
            concept: def.name.clone(),
            dataset: dataset.to_string(),
        })?;
    let mut stats = ExtractStats::default();
    let mut pending = Vec::new();
    for item in items {
        extract_item(ds, index, def, item, &mut pending, &mut stats)?;
    }
    pending.sort_by(|a, b| (a.stay_id, a.time, a.seq).cmp(&(b.stay_id, b.time, b.seq)));

    let agg = def.aggregate();
    let mut events = EventTable::new(def.name.clone());
    let mut i = 0;
    while i < pending.len() {
        let mut j = i + 1;
        while j < pending.len() && pending[j].stay_id == pending[i].stay_id && pending[j].time == pending[i].time {
            j += 1;
        }
        let group = &pending[i..j];
        stats.collapsed_duplicates += group.len() - 1;
        let value = match &group[0].value {
            Value::Num(_) => {
                let vals: Vec<f64> = group.iter().filter_map(|p| p.value.as_f64()).collect();
                Value::Num(agg.apply(&vals))
            }
            Value::Cat(_) => match agg {
                super::Aggregate::Last => group[group.len() - 1].value.clone(),
                _ => group[0].value.clone(),
            },
        };
        events.rows.push(Event {
            stay_id: group[0].stay_id,
            time: group[0].time,
            value,
        });
        i = j;
    }
    Ok(Extraction { events, stats })
}

fn extract_item(
    ds: &Dataset,
    index: &StayIndex,
    def: &ConceptDef,
    item: &SourceItem,
    out: &mut Vec<Pending>,
    stats: &mut ExtractStats,
) -> Result<(), HarmonizeError> {
    let cfg = &ds.cfg;
    let spec = cfg.table(&item.table)?;
    let table = ds.table(&item.table)?;
    let stay_col = &cfg.icustay().id;
    let patient_col = &cfg.patient().id;
    let (id_col, patient_level) = if spec.cols.contains_key(stay_col) {
        (table.column(stay_col)?, false)
    } else if spec.cols.contains_key(patient_col) {
        (table.column(patient_col)?, true)
    } else {
        return Err(HarmonizeError::Table {
            table: item.table.clone(),
            message: "no stay or patient id column".into(),
        });
    };
    let time_col = item
        .index_var
        .as_ref()
        .or(spec.defaults.index_var.as_ref())
        .map(|c| table.column(c))
        .transpose()?;
    let callback = item.callback.clone().unwrap_or(Callback::Identity);
    let constant = match callback {
        Callback::Identity => None,
        Callback::SetValue(v) => Some(v),
        Callback::Other(name) => {
            return Err(HarmonizeError::UnsupportedCallback {
                concept: def.name.clone(),
                callback: name,
            })
        }
    };
    let value_name = item.val_var.as_ref().or(spec.defaults.val_var.as_ref());
    let value_col = match (value_name, constant) {
        (Some(v), _) => Some((v.as_str(), table.column(v)?)),
        (None, Some(_)) => None,
        (None, None) => {
            return Err(HarmonizeError::Table {
                table: item.table.clone(),
                message: format!("concept `{}`: no value column", def.name),
            })
        }
    };
    let selector = match (&item.sub_var, &item.ids, &item.regex) {
        (Some(sub), Some(ids), None) => Selector::Ids(table.column(sub)?, ids),
        (Some(sub), None, Some(re)) => Selector::Pattern(
            table.column(sub)?,
            Regex::new(re).map_err(|e| HarmonizeError::Schema {
                path: format!("{}.sources", def.name),
                message: e.to_string(),
            })?,
        ),
        _ => Selector::All,
    };
    let scale = item.unit_scale.unwrap_or(1.0);
    let unit = cfg.time_unit;

    for row in 0..table.n_rows() {
        if !selector.keep(row) {
            continue;
        }
        stats.rows_matched += 1;
        let Some(id) = id_col.int(row) else {
            stats.dropped_missing += 1;
            continue;
        };
        let time = match time_col {
            Some(c) => match c.minutes(row, unit) {
                Some(t) => Some(t),
                None => {
                    stats.dropped_missing += 1;
                    continue;
                }
            },
            None => None,
        };
        let value = match (constant, value_col) {
            (Some(v), _) => Value::Num(v),
            (None, Some((col_name, col))) => {
                if col.is_null(row) {
                    stats.dropped_missing += 1;
                    continue;
                }
                match def.class {
                    ConceptClass::Categorical => {
                        let text = col.text(row).map(|c| c.into_owned()).unwrap_or_default();
                        if def.levels.as_ref().is_some_and(|l| !l.contains(&text)) {
                            stats.dropped_out_of_bounds += 1;
                            continue;
                        }
                        Value::Cat(text)
                    }
                    ConceptClass::Numeric | ConceptClass::Logical => {
                        let v = numeric_cell(col, row, def.class).ok_or_else(|| HarmonizeError::NonNumericValue {
                            concept: def.name.clone(),
                            table: item.table.clone(),
                            column: col_name.to_string(),
                            value: col.text(row).map(|c| c.into_owned()).unwrap_or_default(),
                        })?;
                        Value::Num(v * scale)
                    }
                }
            }
            (None, None) => unreachable!("value column resolved above"),
        };
        if let Value::Num(v) = value {
            if !v.is_finite() || !def.within_bounds(v) {
                stats.dropped_out_of_bounds += 1;
                continue;
            }
        }
        let mut emit = |stay_id: i64, admit: i64| {
            out.push(Pending {
                stay_id,
                time: time.map_or(0, |t| t - admit),
                seq: out.len(),
                value: value.clone(),
            });
        };
        if patient_level {
            match index.stays_by_patient.get(&id) {
                Some(stays) => stays.iter().for_each(|&(s, a)| emit(s, a)),
                None => stats.dropped_unknown_stay += 1,
            }
        } else {
            match index.admit_by_stay.get(&id) {
                Some(&admit) => emit(id, admit),
                None => stats.dropped_unknown_stay += 1,
            }
        }
    }
    Ok(())
}

fn numeric_cell(col: &RawColumn, row: usize, class: ConceptClass) -> Option<f64> {
    match col {
        RawColumn::Int(v) | RawColumn::Time(v) => v[row].map(|x| x as f64),
        RawColumn::Float(v) => v[row],
        RawColumn::Text(v) => {
            let s = v[row].as_deref()?.trim();
            if class == ConceptClass::Logical {
                match s {
                    "TRUE" | "true" | "T" => return Some(1.0),
                    "FALSE" | "false" | "F" => return Some(0.0),
                    _ => {}
                }
            }
            s.parse().ok()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harmonize::{parse_concept_dictionary, parse_source_config, RawTable};

    const CFG: &str = r#"{
      "name": "aumc",
      "id_cfg": {
        "patient": { "id": "patientid", "position": 1, "start": "origin", "table": "admissions" },
        "icustay": { "id": "admissionid", "position": 2, "start": "admittedat",
                     "end": "dischargedat", "table": "admissions" }
      },
      "tables": {
        "admissions": { "files": "admissions.csv", "cols": {
            "admissionid": { "name": "admissionid", "spec": "col_integer" },
            "patientid": { "name": "patientid", "spec": "col_integer" },
            "admittedat": { "name": "admittedat", "spec": "col_integer" },
            "dischargedat": { "name": "dischargedat", "spec": "col_integer" }
        } },
        "numericitems": { "files": "numericitems.csv",
          "defaults": { "index_var": "measuredat", "val_var": "value" },
          "cols": {
            "admissionid": { "name": "admissionid", "spec": "col_integer" },
            "itemid": { "name": "itemid", "spec": "col_integer" },
            "measuredat": { "name": "measuredat", "spec": "col_integer" },
            "value": { "name": "value", "spec": "col_character" }
        } },
        "history": { "files": "history.csv",
          "defaults": { "index_var": "charttime", "val_var": "value" },
          "cols": {
            "patientid": { "name": "patientid", "spec": "col_integer" },
            "charttime": { "name": "charttime", "spec": "col_integer" },
            "value": { "name": "value", "spec": "col_double" }
        } }
      }
    }"#;

    const DICT: &str = r#"{
      "crea": { "unit": "mg/dL", "min": 0.1, "max": 20, "aggregate": "mean",
        "sources": {
          "aumc": [ { "table": "numericitems", "sub_var": "itemid", "ids": [6836, 9941, 14216], "unit_scale": 0.5 } ],
          "aumc_hist": [ { "table": "history" } ]
        } },
      "crea_max": { "aggregate": "max",
        "sources": { "aumc": [ { "table": "numericitems", "sub_var": "itemid", "ids": [6836, 9941] } ] } },
      "flag": { "sources": { "aumc": [ { "table": "numericitems", "sub_var": "itemid", "ids": 7,
                                        "callback": "transform_fun(set_val(TRUE))" } ] } }
    }"#;

    fn dataset(rows: &[(i64, i64, i64, &str)], shift: i64) -> Dataset {
        let cfg = parse_source_config(CFG).unwrap();
        let adm = RawTable::new("admissions")
            .with_column("admissionid", RawColumn::Int(vec![Some(1), Some(2)]))
            .with_column("patientid", RawColumn::Int(vec![Some(100), Some(100)]))
            .with_column("admittedat", RawColumn::Int(vec![Some(1000 + shift), Some(5000 + shift)]))
            .with_column("dischargedat", RawColumn::Int(vec![Some(3000 + shift), Some(9000 + shift)]));
        let num = RawTable::new("numericitems")
            .with_column("admissionid", RawColumn::Int(rows.iter().map(|r| Some(r.0)).collect()))
            .with_column("itemid", RawColumn::Int(rows.iter().map(|r| Some(r.1)).collect()))
            .with_column("measuredat", RawColumn::Int(rows.iter().map(|r| Some(r.2 + shift)).collect()))
            .with_column("value", RawColumn::Text(rows.iter().map(|r| Some(r.3.to_string())).collect()));
        let hist = RawTable::new("history")
            .with_column("patientid", RawColumn::Int(vec![Some(100)]))
            .with_column("charttime", RawColumn::Int(vec![Some(900 + shift)]))
            .with_column("value", RawColumn::Float(vec![Some(1.1)]));
        let tables = [("admissions", adm), ("numericitems", num), ("history", hist)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        Dataset::new(cfg, tables)
    }

    #[test]
    fn id_filter_keeps_matching_items() {
        let ds = dataset(&[(1, 6836, 1060, "2.0"), (1, 9941, 1120, "2.4"), (1, 999, 1180, "3.0")], 0);
        let dict = parse_concept_dictionary(DICT).unwrap();
        let ex = extract_concept(&ds, dict.get("crea").unwrap(), "aumc").unwrap();
        assert_eq!(ex.events.len(), 2);
        assert_eq!(ex.events.rows[0].time, 60);
        assert_eq!(ex.events.rows[0].value, Value::Num(1.0));
        assert_eq!(ex.events.rows[1].value, Value::Num(1.2));
        assert_eq!(ex.stats.rows_matched, 2);
    }

    #[test]
    fn out_of_bounds_dropped_and_counted() {
        let ds = dataset(&[(1, 6836, 1060, "100"), (1, 6836, 1120, "2")], 0);
        let dict = parse_concept_dictionary(DICT).unwrap();
        let ex = extract_concept(&ds, dict.get("crea").unwrap(), "aumc").unwrap();
        assert_eq!(ex.events.len(), 1);
        assert_eq!(ex.stats.dropped_out_of_bounds, 1);
    }

    #[test]
    fn duplicates_collapse_by_aggregate() {
        let rows = [(2, 6836, 5600, "2.0"), (2, 9941, 5600, "3.0"), (1, 6836, 1000, "1.0")];
        let ds = dataset(&rows, 0);
        let dict = parse_concept_dictionary(DICT).unwrap();
        let mean = extract_concept(&ds, dict.get("crea").unwrap(), "aumc").unwrap();
        assert_eq!(mean.events.rows.len(), 2);
        assert_eq!(mean.events.rows[1].value, Value::Num(1.25));
        assert_eq!(mean.stats.collapsed_duplicates, 1);
        let max = extract_concept(&ds, dict.get("crea_max").unwrap(), "aumc").unwrap();
        assert_eq!(max.events.rows[1].value, Value::Num(3.0));
        assert!(max.events.is_sorted_unique());
    }

    #[test]
    fn patient_level_rows_map_to_every_stay() {
        let ds = dataset(&[], 0);
        let dict = parse_concept_dictionary(DICT).unwrap();
        let ex = extract_concept(&ds, dict.get("crea").unwrap(), "aumc_hist").unwrap();
        let times: Vec<(i64, i64)> = ex.events.rows.iter().map(|e| (e.stay_id, e.time)).collect();
        assert_eq!(times, vec![(1, -100), (2, -4100)]);
    }

    #[test]
    fn set_value_callback() {
        let ds = dataset(&[(1, 7, 1060, "whatever")], 0);
        let dict = parse_concept_dictionary(DICT).unwrap();
        let ex = extract_concept(&ds, dict.get("flag").unwrap(), "aumc").unwrap();
        assert_eq!(ex.events.rows[0].value, Value::Num(1.0));
    }

    #[test]
    fn non_numeric_value_is_an_error() {
        let ds = dataset(&[(1, 6836, 1060, "high")], 0);
        let dict = parse_concept_dictionary(DICT).unwrap();
        let err = extract_concept(&ds, dict.get("crea").unwrap(), "aumc").unwrap_err();
        assert!(matches!(err, HarmonizeError::NonNumericValue { .. }));
    }

    #[test]
    fn absent_dataset_is_an_error() {
        let ds = dataset(&[], 0);
        let dict = parse_concept_dictionary(DICT).unwrap();
        let err = extract_concept(&ds, dict.get("crea_max").unwrap(), "eicu").unwrap_err();
        assert!(matches!(err, HarmonizeError::DatasetNotInConcept { .. }));
    }

    /// Brute-force group-by over `(stay, minute)` compared with extraction.
    #[test]
    fn mean_matches_group_by_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let rows: Vec<(i64, i64, i64, String)> = (0..100)
            .map(|_| {
                let stay = rng.gen_range(1..=2);
                let base = if stay == 1 { 1000 } else { 5000 };
                (stay, 6836, base + rng.gen_range(0..10), format!("{:.2}", rng.gen_range(0.5..8.0)))
            })
            .collect();
        let borrowed: Vec<(i64, i64, i64, &str)> = rows.iter().map(|r| (r.0, r.1, r.2, r.3.as_str())).collect();
        let ds = dataset(&borrowed, 0);
        let dict = parse_concept_dictionary(DICT).unwrap();
        let ex = extract_concept(&ds, dict.get("crea").unwrap(), "aumc").unwrap();

        let mut oracle: std::collections::BTreeMap<(i64, i64), Vec<f64>> = Default::default();
        for r in &rows {
            let admit = if r.0 == 1 { 1000 } else { 5000 };
            oracle.entry((r.0, r.2 - admit)).or_default().push(r.3.parse::<f64>().unwrap() * 0.5);
        }
        assert_eq!(oracle.len(), ex.events.len());
        for (e, ((s, t), vals)) in ex.events.rows.iter().zip(&oracle) {
            assert_eq!((e.stay_id, e.time), (*s, *t));
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!((e.value.as_f64().unwrap() - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn time_shift_equivariance() {
        let rows = [(1, 6836, 1060, "2.0"), (2, 9941, 5600, "3.0"), (2, 6836, 5600, "2.2")];
        let dict = parse_concept_dictionary(DICT).unwrap();
        let a = extract_concept(&dataset(&rows, 0), dict.get("crea").unwrap(), "aumc").unwrap();
        let b = extract_concept(&dataset(&rows, 123_456), dict.get("crea").unwrap(), "aumc").unwrap();
        assert_eq!(a, b);
    }
}
