use std::collections::BTreeMap;
use std::fmt;

use regex::Regex;
use serde::de::{self, MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{classify_json_error, HarmonizeError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    Mean,
    Max,
    Min,
    First,
    Last,
    Sum,
}

impl Aggregate {
    /// Collapses values observed in one group. `values` must be non-empty and in
    /// arrival order.
    pub fn apply(self, values: &[f64]) -> f64 {
        debug_assert!(!values.is_empty());
        match self {
            Aggregate::Mean => values.iter().sum::<f64>() / values.len() as f64,
            Aggregate::Sum => values.iter().sum(),
            Aggregate::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Aggregate::Min => values.iter().copied().fold(f64::INFINITY, f64::min),
            Aggregate::First => values[0],
            Aggregate::Last => values[values.len() - 1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ConceptClass {
    #[default]
    #[serde(rename = "num_cncpt")]
    Numeric,
    #[serde(rename = "fct_cncpt")]
    Categorical,
    #[serde(rename = "lgl_cncpt")]
    Logical,
}

/// An item identifier as written in a concept source: either numeric or text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ItemId {
    Int(i64),
    Str(String),
}

impl ItemId {
    pub fn matches(&self, cell: &str) -> bool {
        match self {
            ItemId::Str(s) => s == cell,
            ItemId::Int(i) => match cell.parse::<i64>() {
                Ok(v) => v == *i,
                Err(_) => cell.parse::<f64>().map_or(false, |v| v == *i as f64),
            },
        }
    }
}

/// Transformations allowed on extracted values. Only simple built-ins are
/// executable; anything else is kept verbatim so dictionaries still parse.
#[derive(Debug, Clone, PartialEq)]
pub enum Callback {
    Identity,
    SetValue(f64),
    Other(String),
}

impl Callback {
    fn parse(text: &str) -> Callback {
        let t: String = text.chars().filter(|c| !c.is_whitespace()).collect();
        if t == "identity" || t == "identity_callback" {
            return Callback::Identity;
        }
        let inner = t
            .strip_prefix("transform_fun(")
            .and_then(|s| s.strip_suffix(')'))
            .unwrap_or(&t);
        if let Some(arg) = inner.strip_prefix("set_val(").and_then(|s| s.strip_suffix(')')) {
            let v = match arg {
                "TRUE" | "true" | "T" => Some(1.0),
                "FALSE" | "false" | "F" => Some(0.0),
                other => other.trim_end_matches('L').parse::<f64>().ok(),
            };
            if let Some(v) = v {
                return Callback::SetValue(v);
            }
        }
        Callback::Other(text.to_string())
    }

    fn render(&self) -> String {
        match self {
            Callback::Identity => "identity".to_string(),
            Callback::SetValue(v) => format!("set_val({v})"),
            Callback::Other(s) => s.clone(),
        }
    }
}

impl Serialize for Callback {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.render())
    }
}

impl<'de> Deserialize<'de> for Callback {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(Callback::parse(&s))
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(ItemId),
    Many(Vec<ItemId>),
}

fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<ItemId>>, D::Error> {
    Ok(Option::<OneOrMany>::deserialize(d)?.map(|v| match v {
        OneOrMany::One(id) => vec![id],
        OneOrMany::Many(ids) => ids,
    }))
}

/// Where a concept lives in one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceItem {
    pub table: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sub_var: Option<String>,
    #[serde(default, deserialize_with = "one_or_many", skip_serializing_if = "Option::is_none")]
    pub ids: Option<Vec<ItemId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regex: Option<String>,
    #[serde(default, alias = "value_var", skip_serializing_if = "Option::is_none")]
    pub val_var: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index_var: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub callback: Option<Callback>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_var: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grp_var: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
}

impl SourceItem {
    fn validate(&self, path: &str) -> Result<(), HarmonizeError> {
        let schema = |message: &str| HarmonizeError::Schema {
            path: path.to_string(),
            message: message.to_string(),
        };
        if self.ids.is_some() && self.regex.is_some() {
            return Err(schema("`ids` and `regex` are mutually exclusive"));
        }
        if (self.ids.is_some() || self.regex.is_some()) && self.sub_var.is_none() {
            return Err(schema("`ids`/`regex` selection requires `sub_var`"));
        }
        if self.ids.as_ref().is_some_and(|ids| ids.is_empty()) {
            return Err(schema("`ids` must not be empty"));
        }
        if let Some(re) = &self.regex {
            Regex::new(re).map_err(|e| schema(&format!("invalid regex: {e}")))?;
        }
        if let Some(s) = self.unit_scale {
            if !s.is_finite() || s == 0.0 {
                return Err(schema("`unit_scale` must be finite and non-zero"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptDef {
    #[serde(skip)]
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub category: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregate: Option<Aggregate>,
    #[serde(default, rename = "min", skip_serializing_if = "Option::is_none")]
    pub plausible_min: Option<f64>,
    #[serde(default, rename = "max", skip_serializing_if = "Option::is_none")]
    pub plausible_max: Option<f64>,
    #[serde(default)]
    pub class: ConceptClass,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    #[serde(default)]
    pub sources: BTreeMap<String, Vec<SourceItem>>,
}

impl ConceptDef {
    /// Aggregation used for duplicate timestamps; numeric concepts default to the
    /// mean, everything else to the first observation.
    pub fn aggregate(&self) -> Aggregate {
        self.aggregate.unwrap_or(match self.class {
            ConceptClass::Numeric => Aggregate::Mean,
            ConceptClass::Logical => Aggregate::Max,
            ConceptClass::Categorical => Aggregate::First,
        })
    }

    pub fn within_bounds(&self, v: f64) -> bool {
        self.plausible_min.map_or(true, |lo| v >= lo) && self.plausible_max.map_or(true, |hi| v <= hi)
    }

    fn validate(&self) -> Result<(), HarmonizeError> {
        let schema = |path: String, message: &str| HarmonizeError::Schema {
            path,
            message: message.to_string(),
        };
        if let (Some(lo), Some(hi)) = (self.plausible_min, self.plausible_max) {
            if lo >= hi {
                return Err(schema(self.name.clone(), "`min` must be smaller than `max`"));
            }
        }
        if self.class == ConceptClass::Categorical
            && !matches!(self.aggregate(), Aggregate::First | Aggregate::Last)
        {
            return Err(schema(
                format!("{}.aggregate", self.name),
                "categorical concepts aggregate with `first` or `last` only",
            ));
        }
        for (dataset, items) in &self.sources {
            for (i, item) in items.iter().enumerate() {
                item.validate(&format!("{}.sources.{}[{}]", self.name, dataset, i))?;
            }
        }
        Ok(())
    }
}

/// Concept name to definition.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConceptDictionary {
    concepts: BTreeMap<String, ConceptDef>,
}

impl ConceptDictionary {
    pub fn get(&self, name: &str) -> Option<&ConceptDef> {
        self.concepts.get(name)
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ConceptDef> {
        self.concepts.values()
    }

    pub fn insert(&mut self, mut def: ConceptDef, name: &str) -> Result<(), HarmonizeError> {
        def.name = name.to_string();
        def.validate()?;
        if self.concepts.insert(name.to_string(), def).is_some() {
            return Err(HarmonizeError::DuplicateConcept(name.to_string()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.concepts).expect("concept dictionary serializes")
    }
}

struct Entries(Vec<(String, ConceptDef)>);

impl<'de> Deserialize<'de> for Entries {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct EntriesVisitor;
        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = Entries;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a mapping of concept names to definitions")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Entries, A::Error> {
                let mut out = Vec::new();
                while let Some(key) = map.next_key::<String>()? {
                    let def: ConceptDef = map.next_value()?;
                    out.push((key, def));
                }
                Ok(Entries(out))
            }
        }
        d.deserialize_map(EntriesVisitor)
    }
}

pub fn parse_concept_dictionary(text: &str) -> Result<ConceptDictionary, HarmonizeError> {
    let mut de = serde_json::Deserializer::from_str(text);
    let entries: Entries = serde_path_to_error::deserialize(&mut de).map_err(classify_json_error)?;
    de.end().map_err(|e| HarmonizeError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let mut dict = ConceptDictionary::default();
    for (name, def) in entries.0 {
        dict.insert(def, &name)?;
    }
    Ok(dict)
}

impl Serialize for ConceptDictionary {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.concepts.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ConceptDictionary {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let entries = Entries::deserialize(d)?;
        let mut dict = ConceptDictionary::default();
        for (name, def) in entries.0 {
            dict.insert(def, &name).map_err(de::Error::custom)?;
        }
        Ok(dict)
    }
}
