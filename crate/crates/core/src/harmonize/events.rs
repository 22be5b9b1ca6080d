use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Num(f64),
    Cat(String),
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Num(v) => Some(*v),
            Value::Cat(_) => None,
        }
    }
}

/// One harmonized observation: minutes are relative to ICU admission of the stay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub stay_id: i64,
    pub time: i64,
    pub value: Value,
}

/// Observations of a single concept, sorted by `(stay_id, time)` with at most
/// one row per key.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventTable {
    pub concept: String,
    pub rows: Vec<Event>,
}

impl EventTable {
    pub fn new(concept: impl Into<String>) -> Self {
        EventTable {
            concept: concept.into(),
            rows: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows of one stay; relies on the sort invariant.
    pub fn stay(&self, stay_id: i64) -> &[Event] {
        let lo = self.rows.partition_point(|e| e.stay_id < stay_id);
        let hi = self.rows.partition_point(|e| e.stay_id <= stay_id);
        &self.rows[lo..hi]
    }

    /// Numeric `(minute, value)` pairs of one stay.
    pub fn series(&self, stay_id: i64) -> Vec<(i64, f64)> {
        self.stay(stay_id)
            .iter()
            .filter_map(|e| e.value.as_f64().map(|v| (e.time, v)))
            .collect()
    }

    pub fn is_sorted_unique(&self) -> bool {
        self.rows
            .windows(2)
            .all(|w| (w[0].stay_id, w[0].time) < (w[1].stay_id, w[1].time))
    }
}

/// Extracted concepts keyed by name.
pub type EventSet = BTreeMap<String, EventTable>;
