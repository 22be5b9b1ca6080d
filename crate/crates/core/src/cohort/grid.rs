use serde::{Deserialize, Serialize};

use super::MINUTES_PER_BIN;
use crate::harmonize::{Aggregate, ConceptDef, EventSet, Value};

/// A grid column: concept name plus how to collapse several values per bin.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFeature {
    pub name: String,
    pub aggregate: Aggregate,
    /// Categorical levels; a value is coded by its position.
    pub levels: Option<Vec<String>>,
}

impl GridFeature {
    pub fn from_def(name: &str, def: &ConceptDef) -> Self {
        GridFeature {
            name: name.to_string(),
            aggregate: def.aggregate(),
            levels: def.levels.clone(),
        }
    }

    pub fn numeric(name: &str, aggregate: Aggregate) -> Self {
        GridFeature {
            name: name.to_string(),
            aggregate,
            levels: None,
        }
    }
}

/// Numeric code of an observation: numbers pass through, categories map to
/// their level index.
pub fn encode_value(value: &Value, levels: Option<&[String]>) -> Option<f64> {
    match value {
        Value::Num(v) => Some(*v),
        Value::Cat(s) => levels?.iter().position(|l| l == s).map(|i| i as f64),
    }
}

/// Static covariates of one stay; `None` is missing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StaticRecord {
    pub age: Option<f64>,
    pub sex: Option<f64>,
    pub height: Option<f64>,
    pub weight: Option<f64>,
}

impl StaticRecord {
    pub fn values(&self) -> [Option<f64>; 4] {
        [self.age, self.sex, self.height, self.weight]
    }
}

/// Hourly feature matrix of one stay. A `None` cell is a masked bin.
#[derive(Debug, Clone, PartialEq)]
pub struct StayGrid {
    pub stay_id: i64,
    pub features: Vec<String>,
    /// `values[f][h]` for feature `f` in bin `h`.
    pub values: Vec<Vec<Option<f64>>>,
    pub n_bins: usize,
}

impl StayGrid {
    pub fn is_masked(&self, feature: usize, bin: usize) -> bool {
        self.values[feature][bin].is_none()
    }

    fn bin_observed(&self, bin: usize) -> bool {
        self.values.iter().any(|f| f[bin].is_some())
    }

    /// Bins with at least one measurement of any feature.
    pub fn observed_bins(&self) -> usize {
        (0..self.n_bins).filter(|&h| self.bin_observed(h)).count()
    }

    /// Longest run of consecutive bins without any measurement.
    pub fn longest_gap(&self) -> usize {
        let mut best = 0;
        let mut run = 0;
        for h in 0..self.n_bins {
            if self.bin_observed(h) {
                run = 0;
            } else {
                run += 1;
                best = best.max(run);
            }
        }
        best
    }
}

/// Number of hourly bins covering a stay of `los_minutes`.
pub fn n_bins(los_minutes: i64) -> usize {
    if los_minutes <= 0 {
        0
    } else {
        ((los_minutes + MINUTES_PER_BIN - 1) / MINUTES_PER_BIN) as usize
    }
}

/// Bins measurements into `[h, h + 1)` hours since admission; events outside
/// the stay are ignored.
pub fn build_stay_grid(events: &EventSet, features: &[GridFeature], stay_id: i64, los_minutes: i64) -> StayGrid {
    let bins = n_bins(los_minutes);
    let values = features
        .iter()
        .map(|feat| {
            let mut col = vec![None; bins];
            let Some(table) = events.get(&feat.name) else {
                return col;
            };
            let mut current: Option<usize> = None;
            let mut pending: Vec<f64> = Vec::new();
            let flush = |h: Option<usize>, pending: &mut Vec<f64>, col: &mut Vec<Option<f64>>| {
                if let Some(h) = h {
                    if !pending.is_empty() {
                        col[h] = Some(feat.aggregate.apply(pending));
                    }
                }
                pending.clear();
            };
            for ev in table.stay(stay_id) {
                if ev.time < 0 || ev.time >= los_minutes {
                    continue;
                }
                let Some(v) = encode_value(&ev.value, feat.levels.as_deref()) else {
                    continue;
                };
                let h = (ev.time / MINUTES_PER_BIN) as usize;
                if current != Some(h) {
                    flush(current, &mut pending, &mut col);
                    current = Some(h);
                }
                pending.push(v);
            }
            flush(current, &mut pending, &mut col);
            col
        })
        .collect();
    StayGrid {
        stay_id,
        features: features.iter().map(|f| f.name.clone()).collect(),
        values,
        n_bins: bins,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harmonize::{Event, EventTable};
    use rand::{Rng, SeedableRng};
    use std::collections::BTreeMap;

    fn table(name: &str, rows: &[(i64, i64, f64)]) -> EventTable {
        let mut t = EventTable::new(name);
        t.rows = rows
            .iter()
            .map(|&(stay_id, time, v)| Event {
                stay_id,
                time,
                value: Value::Num(v),
            })
            .collect();
        t
    }

    #[test]
    fn mean_within_bin() {
        let mut ev = EventSet::new();
        ev.insert("hr".into(), table("hr", &[(1, 10, 80.0), (1, 50, 90.0), (1, 70, 60.0)]));
        let g = build_stay_grid(&ev, &[GridFeature::numeric("hr", Aggregate::Mean)], 1, 180);
        assert_eq!(g.values[0], vec![Some(85.0), Some(60.0), None]);
        assert!(g.is_masked(0, 2));
    }

    #[test]
    fn six_hour_stay_has_six_bins() {
        let mut ev = EventSet::new();
        ev.insert("hr".into(), table("hr", &[(1, 30, 80.0), (1, 360, 1.0)]));
        let g = build_stay_grid(&ev, &[GridFeature::numeric("hr", Aggregate::Mean)], 1, 360);
        assert_eq!(g.n_bins, 6);
        assert_eq!((0..6).filter(|&h| g.is_masked(0, h)).count(), 5);
        assert_eq!(g.longest_gap(), 5);
        assert_eq!(g.observed_bins(), 1);
    }

    #[test]
    fn empty_events_give_masked_grid() {
        let g = build_stay_grid(&EventSet::new(), &[GridFeature::numeric("hr", Aggregate::Mean)], 1, 61);
        assert_eq!(g.n_bins, 2);
        assert_eq!(g.values[0], vec![None, None]);
    }

    #[test]
    fn categorical_levels_are_coded() {
        let levels = vec!["Male".to_string(), "Female".to_string()];
        assert_eq!(encode_value(&Value::Cat("Female".into()), Some(&levels)), Some(1.0));
        assert_eq!(encode_value(&Value::Cat("Other".into()), Some(&levels)), None);
        assert_eq!(encode_value(&Value::Cat("Male".into()), None), None);
    }

    /// Compare against a literal group-by over (bin, feature).
    #[test]
    fn matches_group_by_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let los = rng.gen_range(1..2000);
            let mut rows: Vec<(i64, i64, f64)> = (0..rng.gen_range(0..60))
                .map(|_| (7, rng.gen_range(-100..2100), rng.gen_range(0..100) as f64))
                .collect();
            rows.sort_by_key(|r| r.1);
            rows.dedup_by_key(|r| r.1);
            let mut ev = EventSet::new();
            ev.insert("x".into(), table("x", &rows));
            for agg in [Aggregate::Mean, Aggregate::Max, Aggregate::Min, Aggregate::Sum, Aggregate::First, Aggregate::Last] {
                let g = build_stay_grid(&ev, &[GridFeature::numeric("x", agg)], 7, los);
                let mut groups: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
                for &(_, t, v) in &rows {
                    if t >= 0 && t < los {
                        groups.entry(t / 60).or_default().push(v);
                    }
                }
                let mut want = vec![None; n_bins(los)];
                for (h, vs) in groups {
                    want[h as usize] = Some(match agg {
                        Aggregate::Mean => vs.iter().sum::<f64>() / vs.len() as f64,
                        Aggregate::Max => vs.iter().cloned().fold(f64::MIN, f64::max),
                        Aggregate::Min => vs.iter().cloned().fold(f64::MAX, f64::min),
                        Aggregate::Sum => vs.iter().sum(),
                        Aggregate::First => vs[0],
                        Aggregate::Last => *vs.last().unwrap(),
                    });
                }
                assert_eq!(g.values[0], want, "{agg:?}");
            }
        }
    }
}
