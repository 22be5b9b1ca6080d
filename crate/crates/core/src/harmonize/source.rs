use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{classify_json_error, HarmonizeError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeUnit {
    #[default]
    Minutes,
    Seconds,
    Hours,
}

/// One ID system of a dataset, e.g. `patient` or `icustay`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdLevel {
    pub id: String,
    pub position: u32,
    pub start: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end: Option<String>,
    pub table: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColumnType {
    #[serde(rename = "col_integer")]
    Integer,
    #[serde(rename = "col_double")]
    Double,
    #[serde(rename = "col_character")]
    Character,
    #[serde(rename = "col_logical")]
    Logical,
    #[serde(rename = "col_datetime")]
    Datetime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSpec {
    /// Header of the column in the raw file.
    pub name: String,
    pub spec: ColumnType,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableDefaults {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index_var: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub time_vars: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_var: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableSpec {
    pub files: String,
    #[serde(default)]
    pub defaults: TableDefaults,
    pub cols: BTreeMap<String, ColumnSpec>,
}

/// Table layout and ID hierarchy of one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    pub name: String,
    #[serde(default)]
    pub time_unit: TimeUnit,
    pub id_cfg: BTreeMap<String, IdLevel>,
    pub tables: BTreeMap<String, TableSpec>,
}

impl SourceConfig {
    pub fn patient(&self) -> &IdLevel {
        &self.id_cfg["patient"]
    }

    pub fn icustay(&self) -> &IdLevel {
        &self.id_cfg["icustay"]
    }

    pub fn table(&self, name: &str) -> Result<&TableSpec, HarmonizeError> {
        self.tables
            .get(name)
            .ok_or_else(|| HarmonizeError::MissingTable(name.to_string()))
    }

    fn validate(&self) -> Result<(), HarmonizeError> {
        if self.tables.is_empty() {
            return Err(HarmonizeError::NoTables);
        }
        for level in ["patient", "icustay"] {
            if !self.id_cfg.contains_key(level) {
                return Err(HarmonizeError::MissingIdLevel(level.to_string()));
            }
        }
        if self.patient().position >= self.icustay().position {
            return Err(HarmonizeError::Schema {
                path: "id_cfg".into(),
                message: "`patient` must precede `icustay` in the id hierarchy".into(),
            });
        }
        for (level_name, level) in &self.id_cfg {
            let table = self.tables.get(&level.table).ok_or_else(|| HarmonizeError::Schema {
                path: format!("id_cfg.{level_name}.table"),
                message: format!("unknown table `{}`", level.table),
            })?;
            let refs = [Some(&level.id), Some(&level.start), level.end.as_ref()];
            for col in refs.into_iter().flatten() {
                // A patient-level start may be an implicit origin (time zero).
                if level_name == "patient" && col == &level.start && !table.cols.contains_key(col) {
                    continue;
                }
                if !table.cols.contains_key(col) {
                    return Err(HarmonizeError::DanglingReference {
                        table: level.table.clone(),
                        column: col.clone(),
                        context: format!("id_cfg.{level_name}"),
                    });
                }
            }
        }
        let stays = self.icustay();
        if !self.tables[&stays.table].cols.contains_key(&self.patient().id) {
            return Err(HarmonizeError::DanglingReference {
                table: stays.table.clone(),
                column: self.patient().id.clone(),
                context: "id_cfg.patient.id (stay table must link stays to patients)".into(),
            });
        }
        for (name, table) in &self.tables {
            let d = &table.defaults;
            let refs = d.index_var.iter().chain(d.time_vars.iter()).chain(d.val_var.iter());
            for col in refs {
                if !table.cols.contains_key(col) {
                    return Err(HarmonizeError::DanglingReference {
                        table: name.clone(),
                        column: col.clone(),
                        context: format!("tables.{name}.defaults"),
                    });
                }
            }
        }
        Ok(())
    }
}

pub fn parse_source_config(text: &str) -> Result<SourceConfig, HarmonizeError> {
    let mut de = serde_json::Deserializer::from_str(text);
    let cfg: SourceConfig = serde_path_to_error::deserialize(&mut de).map_err(classify_json_error)?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub const SIC: &str = r#"{
        "name": "sic",
        "time_unit": "seconds",
        "id_cfg": {
          "patient": { "id": "patientid", "position": 1, "start": "firstadmission",
                       "end": "offsetofdeath", "table": "cases" },
          "icustay": { "id": "caseid", "position": 2, "start": "offsetafterfirstadmission",
                       "end": "timeofstay", "table": "cases" }
        },
        "tables": {
          "cases": {
            "files": "cases.csv.gz",
            "defaults": { "index_var": "offsetafterfirstadmission",
                          "time_vars": ["offsetafterfirstadmission", "offsetofdeath"] },
            "cols": {
              "caseid": { "name": "CaseID", "spec": "col_integer" },
              "patientid": { "name": "PatientID", "spec": "col_integer" },
              "admissionyear": { "name": "AdmissionYear", "spec": "col_integer" },
              "offsetafterfirstadmission": { "name": "OffsetAfterFirstAdmission", "spec": "col_integer" },
              "offsetofdeath": { "name": "OffsetOfDeath", "spec": "col_integer" },
              "timeofstay": { "name": "TimeOfStay", "spec": "col_integer" }
            }
          },
          "laboratory": {
            "files": "laboratory.csv.gz",
            "defaults": { "index_var": "offset", "val_var": "laboratoryvalue" },
            "cols": {
              "caseid": { "name": "CaseID", "spec": "col_integer" },
              "laboratoryid": { "name": "LaboratoryID", "spec": "col_integer" },
              "offset": { "name": "Offset", "spec": "col_integer" },
              "laboratoryvalue": { "name": "LaboratoryValue", "spec": "col_double" }
            }
          }
        }
    }"#;

    #[test]
    fn sic_config_has_two_levels() {
        let cfg = parse_source_config(SIC).unwrap();
        assert_eq!(cfg.id_cfg.len(), 2);
        assert_eq!(cfg.icustay().id, "caseid");
        assert_eq!(cfg.patient().id, "patientid");
        assert_eq!(cfg.time_unit, TimeUnit::Seconds);
        assert_eq!(cfg.tables["cases"].cols["caseid"].name, "CaseID");
    }

    #[test]
    fn zero_tables_rejected() {
        let text = r#"{"name": "x", "id_cfg": {}, "tables": {}}"#;
        assert!(matches!(parse_source_config(text), Err(HarmonizeError::NoTables)));
    }

    #[test]
    fn dangling_stay_start_rejected() {
        let text = SIC.replace(
            r#""start": "offsetafterfirstadmission""#,
            r#""start": "admissiontime""#,
        );
        match parse_source_config(&text) {
            Err(HarmonizeError::DanglingReference { table, column, .. }) => {
                assert_eq!(table, "cases");
                assert_eq!(column, "admissiontime");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_level_rejected() {
        let v: serde_json::Value = serde_json::from_str(SIC).unwrap();
        let mut v = v;
        v["id_cfg"].as_object_mut().unwrap().remove("icustay");
        let err = parse_source_config(&v.to_string()).unwrap_err();
        assert!(matches!(err, HarmonizeError::MissingIdLevel(l) if l == "icustay"));
    }

    #[test]
    fn dangling_default_rejected() {
        let text = SIC.replace(r#""val_var": "laboratoryvalue""#, r#""val_var": "nope""#);
        assert!(matches!(
            parse_source_config(&text),
            Err(HarmonizeError::DanglingReference { .. })
        ));
    }

    #[test]
    fn unknown_key_rejected_with_path() {
        let text = SIC.replace(r#""files": "cases.csv.gz","#, r#""files": "cases.csv.gz", "zzz": 1,"#);
        match parse_source_config(&text) {
            Err(HarmonizeError::Schema { path, .. }) => assert_eq!(path, "tables.cases.zzz"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
