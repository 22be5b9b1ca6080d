use std::collections::HashSet;
use std::fs::File;
use std::path::Path;
use std::sync::Arc;

use parquet::basic::{Repetition, Type as PhysicalType};
use parquet::column::reader::{get_typed_column_reader, ColumnReader};
use parquet::data_type::{DoubleType, Int64Type};
use parquet::file::properties::WriterProperties;
use parquet::file::reader::{FileReader, SerializedFileReader};
use parquet::file::writer::SerializedFileWriter;
use parquet::schema::types::Type;
use serde::{Deserialize, Serialize};

use super::CohortError;
use crate::frame::{ColumnData, Frame};

pub const STATIC_FILE: &str = "sta";
pub const DYNAMIC_FILE: &str = "dyn";
pub const OUTCOME_FILE: &str = "outc";
pub const VARS_FILE: &str = "vars.json";

/// Column roles shared by the three cohort tables.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VarRoles {
    #[serde(rename = "GROUP")]
    pub group: String,
    #[serde(rename = "SEQUENCE")]
    pub sequence: String,
    #[serde(rename = "LABEL")]
    pub label: String,
    #[serde(rename = "DYNAMIC")]
    pub dynamic: Vec<String>,
    #[serde(rename = "STATIC")]
    pub statics: Vec<String>,
}

impl VarRoles {
    pub fn new(dynamic: Vec<String>, statics: Vec<String>) -> Self {
        VarRoles {
            group: "stay_id".into(),
            sequence: "time".into(),
            label: "label".into(),
            dynamic,
            statics,
        }
    }
}

/// STATIC, DYNAMIC and OUTCOME tables of one task cohort.
///
/// Key columns (group and sequence) are integers; all other columns are
/// nullable floats. The outcome table carries the sequence column only for
/// hourly tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortBundle {
    pub statics: Frame,
    pub dynamic: Frame,
    pub outcome: Frame,
    pub vars: VarRoles,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CohortFormat {
    #[default]
    Parquet,
    Csv,
}

impl CohortFormat {
    fn ext(self) -> &'static str {
        match self {
            CohortFormat::Parquet => "parquet",
            CohortFormat::Csv => "csv",
        }
    }
}

fn invalid(msg: impl Into<String>) -> CohortError {
    CohortError::Invalid(msg.into())
}

impl CohortBundle {
    /// Puts columns into role order and checks the bundle invariants.
    pub fn new(statics: Frame, dynamic: Frame, outcome: Frame, vars: VarRoles) -> Result<Self, CohortError> {
        let sta_order: Vec<&str> = std::iter::once(vars.group.as_str())
            .chain(vars.statics.iter().map(String::as_str))
            .collect();
        let dyn_order: Vec<&str> = [vars.group.as_str(), vars.sequence.as_str()]
            .into_iter()
            .chain(vars.dynamic.iter().map(String::as_str))
            .collect();
        let mut outc_order = vec![vars.group.as_str()];
        if outcome.has(&vars.sequence) {
            outc_order.push(vars.sequence.as_str());
        }
        outc_order.push(vars.label.as_str());
        for (frame, order, what) in [
            (&statics, &sta_order, STATIC_FILE),
            (&dynamic, &dyn_order, DYNAMIC_FILE),
            (&outcome, &outc_order, OUTCOME_FILE),
        ] {
            if frame.n_cols() != order.len() {
                let extra: Vec<&str> = frame.names().filter(|n| !order.contains(n)).collect();
                return Err(invalid(format!("{what} has columns without a role: {extra:?}")));
            }
        }
        let bundle = CohortBundle {
            statics: statics.reorder(&sta_order)?,
            dynamic: dynamic.reorder(&dyn_order)?,
            outcome: outcome.reorder(&outc_order)?,
            vars,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn is_hourly(&self) -> bool {
        self.outcome.has(&self.vars.sequence)
    }

    pub fn validate(&self) -> Result<(), CohortError> {
        let v = &self.vars;
        let keys = [v.group.as_str(), v.sequence.as_str()];
        for (frame, what) in [
            (&self.statics, STATIC_FILE),
            (&self.dynamic, DYNAMIC_FILE),
            (&self.outcome, OUTCOME_FILE),
        ] {
            for c in frame.columns() {
                let is_key = keys.contains(&c.name.as_str());
                match (&c.data, is_key) {
                    (ColumnData::Int(_), true) | (ColumnData::Float(_), false) => {}
                    _ => return Err(invalid(format!("{what}.{} has the wrong type for its role", c.name))),
                }
            }
        }
        let stays: HashSet<i64> = self.statics.int(&v.group)?.iter().copied().collect();
        if stays.len() != self.statics.n_rows() {
            return Err(invalid("duplicate stay in static table"));
        }
        for (frame, what) in [(&self.dynamic, DYNAMIC_FILE), (&self.outcome, OUTCOME_FILE)] {
            let ids = frame.int(&v.group)?;
            if let Some(id) = ids.iter().find(|id| !stays.contains(id)) {
                return Err(invalid(format!("{what} references stay {id} missing from the static table")));
            }
            let mut seen = HashSet::new();
            let times = frame.int(&v.sequence).ok();
            for i in 0..frame.n_rows() {
                if !seen.insert((ids[i], times.map(|t| t[i]))) {
                    return Err(invalid(format!("{what} has a duplicate key for stay {}", ids[i])));
                }
            }
        }
        Ok(())
    }

    /// Stay ids in static-table order.
    pub fn stay_ids(&self) -> &[i64] {
        self.statics.int(&self.vars.group).expect("validated bundle")
    }

    /// Restricts all three tables to the given stays.
    pub fn subset(&self, stays: &HashSet<i64>) -> CohortBundle {
        let g = &self.vars.group;
        CohortBundle {
            statics: self.statics.filter_by_key(g, |s| stays.contains(&s)).expect("validated bundle"),
            dynamic: self.dynamic.filter_by_key(g, |s| stays.contains(&s)).expect("validated bundle"),
            outcome: self.outcome.filter_by_key(g, |s| stays.contains(&s)).expect("validated bundle"),
            vars: self.vars.clone(),
        }
    }
}

pub fn write_cohort(bundle: &CohortBundle, dir: &Path, format: CohortFormat) -> Result<(), CohortError> {
    bundle.validate()?;
    std::fs::create_dir_all(dir)?;
    for (frame, stem) in [
        (&bundle.statics, STATIC_FILE),
        (&bundle.dynamic, DYNAMIC_FILE),
        (&bundle.outcome, OUTCOME_FILE),
    ] {
        let path = dir.join(format!("{stem}.{}", format.ext()));
        match format {
            CohortFormat::Parquet => write_parquet(frame, &path)?,
            CohortFormat::Csv => write_csv(frame, &path)?,
        }
    }
    std::fs::write(dir.join(VARS_FILE), serde_json::to_string_pretty(&bundle.vars)?)?;
    Ok(())
}

/// Reads a cohort directory, preferring parquet over CSV per table. Columns are
/// matched by name. Without `vars.json` the default role names are assumed.
pub fn read_cohort(dir: &Path) -> Result<CohortBundle, CohortError> {
    let vars_path = dir.join(VARS_FILE);
    let declared: Option<VarRoles> = if vars_path.exists() {
        Some(serde_json::from_str(&std::fs::read_to_string(&vars_path)?)?)
    } else {
        None
    };
    let defaults = VarRoles::new(Vec::new(), Vec::new());
    let keys = declared.as_ref().unwrap_or(&defaults);
    let key_names = [keys.group.clone(), keys.sequence.clone()];
    let load = |stem: &'static str| -> Result<Frame, CohortError> {
        let pq = dir.join(format!("{stem}.parquet"));
        let csv = dir.join(format!("{stem}.csv"));
        if pq.exists() {
            read_parquet(&pq)
        } else if csv.exists() {
            read_csv(&csv, &key_names)
        } else {
            Err(CohortError::MissingFile {
                dir: dir.to_path_buf(),
                table: stem,
            })
        }
    };
    let statics = load(STATIC_FILE)?;
    let dynamic = load(DYNAMIC_FILE)?;
    let outcome = load(OUTCOME_FILE)?;
    let vars = match declared {
        Some(v) => v,
        None => {
            let mut v = defaults.clone();
            v.dynamic = dynamic.names().filter(|n| !key_names.iter().any(|k| k == n)).map(String::from).collect();
            v.statics = statics.names().filter(|n| *n != v.group).map(String::from).collect();
            v
        }
    };
    CohortBundle::new(statics, dynamic, outcome, vars)
}

fn write_parquet(frame: &Frame, path: &Path) -> Result<(), CohortError> {
    let fields = frame
        .columns()
        .iter()
        .map(|c| {
            let (ty, rep) = match c.data {
                ColumnData::Int(_) => (PhysicalType::INT64, Repetition::REQUIRED),
                ColumnData::Float(_) => (PhysicalType::DOUBLE, Repetition::OPTIONAL),
            };
            Type::primitive_type_builder(&c.name, ty)
                .with_repetition(rep)
                .build()
                .map(Arc::new)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let schema = Arc::new(Type::group_type_builder("schema").with_fields(fields).build()?);
    let props = Arc::new(WriterProperties::builder().build());
    let mut writer = SerializedFileWriter::new(File::create(path)?, schema, props)?;
    let mut rg = writer.next_row_group()?;
    let mut i = 0;
    while let Some(mut col) = rg.next_column()? {
        match &frame.columns()[i].data {
            ColumnData::Int(v) => {
                col.typed::<Int64Type>().write_batch(v, None, None)?;
            }
            ColumnData::Float(v) => {
                let values: Vec<f64> = v.iter().flatten().copied().collect();
                let defs: Vec<i16> = v.iter().map(|x| i16::from(x.is_some())).collect();
                col.typed::<DoubleType>().write_batch(&values, Some(&defs), None)?;
            }
        }
        col.close()?;
        i += 1;
    }
    rg.close()?;
    writer.close()?;
    Ok(())
}

fn read_parquet(path: &Path) -> Result<Frame, CohortError> {
    let schema_err = |message: String| CohortError::Schema {
        file: path.display().to_string(),
        message,
    };
    let reader = SerializedFileReader::new(File::open(path)?)?;
    let meta = reader.metadata();
    let descr = meta.file_metadata().schema_descr();
    let n_rows = meta.file_metadata().num_rows() as usize;
    let mut columns: Vec<ColumnData> = Vec::new();
    for j in 0..descr.num_columns() {
        let c = descr.column(j);
        columns.push(match (c.physical_type(), c.max_def_level()) {
            (PhysicalType::INT64, 0) => ColumnData::Int(Vec::with_capacity(n_rows)),
            (PhysicalType::DOUBLE, _) => ColumnData::Float(Vec::with_capacity(n_rows)),
            (ty, _) => return Err(schema_err(format!("column `{}` has unsupported type {ty}", c.name()))),
        });
    }
    for g in 0..reader.num_row_groups() {
        let rg = reader.get_row_group(g)?;
        let rows = rg.metadata().num_rows() as usize;
        for (j, data) in columns.iter_mut().enumerate() {
            let col_reader: ColumnReader = rg.get_column_reader(j)?;
            match data {
                ColumnData::Int(out) => {
                    let mut r = get_typed_column_reader::<Int64Type>(col_reader);
                    let mut values = Vec::with_capacity(rows);
                    while values.len() < rows {
                        let (n, _, _) = r.read_records(rows - values.len(), None, None, &mut values)?;
                        if n == 0 {
                            break;
                        }
                    }
                    out.extend(values);
                }
                ColumnData::Float(out) => {
                    let mut r = get_typed_column_reader::<DoubleType>(col_reader);
                    let mut values = Vec::with_capacity(rows);
                    let mut defs = Vec::with_capacity(rows);
                    let required = descr.column(j).max_def_level() == 0;
                    let mut read = 0;
                    while read < rows {
                        let (n, _, _) = r.read_records(rows - read, Some(&mut defs), None, &mut values)?;
                        if n == 0 {
                            break;
                        }
                        read += n;
                    }
                    if required {
                        out.extend(values.into_iter().map(Some));
                    } else {
                        let mut it = values.into_iter();
                        out.extend(defs.iter().map(|&d| if d > 0 { it.next() } else { None }));
                    }
                }
            }
        }
    }
    let mut frame = Frame::new();
    for (j, data) in columns.into_iter().enumerate() {
        if data.len() != n_rows {
            return Err(schema_err(format!("column `{}` is truncated", descr.column(j).name())));
        }
        frame
            .push(descr.column(j).name(), data)
            .map_err(|e| schema_err(e.to_string()))?;
    }
    Ok(frame)
}

fn write_csv(frame: &Frame, path: &Path) -> Result<(), CohortError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(frame.names())?;
    let mut record = Vec::with_capacity(frame.n_cols());
    for i in 0..frame.n_rows() {
        record.clear();
        for c in frame.columns() {
            record.push(match &c.data {
                ColumnData::Int(v) => v[i].to_string(),
                ColumnData::Float(v) => v[i].map_or_else(String::new, |x| x.to_string()),
            });
        }
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

fn read_csv(path: &Path, int_columns: &[String]) -> Result<Frame, CohortError> {
    let schema_err = |message: String| CohortError::Schema {
        file: path.display().to_string(),
        message,
    };
    let mut r = csv::Reader::from_path(path)?;
    let headers: Vec<String> = r.headers()?.iter().map(String::from).collect();
    let mut columns: Vec<ColumnData> = headers
        .iter()
        .map(|h| {
            if int_columns.contains(h) {
                ColumnData::Int(Vec::new())
            } else {
                ColumnData::Float(Vec::new())
            }
        })
        .collect();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        for (j, cell) in rec.iter().enumerate() {
            let bad = |what: &str| schema_err(format!("row {}: column `{}` {what}: `{cell}`", line + 1, headers[j]));
            match &mut columns[j] {
                ColumnData::Int(v) => v.push(cell.trim().parse().map_err(|_| bad("expects an integer"))?),
                ColumnData::Float(v) => v.push(match cell.trim() {
                    "" | "NA" => None,
                    s => Some(s.parse().map_err(|_| bad("expects a number"))?),
                }),
            }
        }
    }
    let mut frame = Frame::new();
    for (h, data) in headers.into_iter().zip(columns) {
        frame.push(h, data).map_err(|e| schema_err(e.to_string()))?;
    }
    Ok(frame)
}
