use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;

use super::source::{ColumnType, SourceConfig, TableSpec, TimeUnit};
use super::{parse_source_config, HarmonizeError};

/// A typed column of a raw table. `Time` holds datetimes already converted to
/// minutes since the Unix epoch.
#[derive(Debug, Clone, PartialEq)]
pub enum RawColumn {
    Int(Vec<Option<i64>>),
    Float(Vec<Option<f64>>),
    Text(Vec<Option<String>>),
    Time(Vec<Option<i64>>),
}

impl RawColumn {
    pub fn len(&self) -> usize {
        match self {
            RawColumn::Int(v) | RawColumn::Time(v) => v.len(),
            RawColumn::Float(v) => v.len(),
            RawColumn::Text(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_null(&self, row: usize) -> bool {
        match self {
            RawColumn::Int(v) | RawColumn::Time(v) => v[row].is_none(),
            RawColumn::Float(v) => v[row].is_none(),
            RawColumn::Text(v) => v[row].is_none(),
        }
    }

    pub fn text(&self, row: usize) -> Option<Cow<'_, str>> {
        match self {
            RawColumn::Int(v) | RawColumn::Time(v) => v[row].map(|x| Cow::Owned(x.to_string())),
            RawColumn::Float(v) => v[row].map(|x| Cow::Owned(x.to_string())),
            RawColumn::Text(v) => v[row].as_deref().map(Cow::Borrowed),
        }
    }

    pub fn int(&self, row: usize) -> Option<i64> {
        match self {
            RawColumn::Int(v) | RawColumn::Time(v) => v[row],
            RawColumn::Float(v) => v[row].filter(|x| x.fract() == 0.0).map(|x| x as i64),
            RawColumn::Text(v) => v[row].as_deref().and_then(|s| s.trim().parse().ok()),
        }
    }

    /// Time in minutes. Numeric columns are interpreted in `unit`.
    pub fn minutes(&self, row: usize, unit: TimeUnit) -> Option<i64> {
        match self {
            RawColumn::Time(v) => v[row],
            RawColumn::Int(v) => v[row].map(|x| match unit {
                TimeUnit::Minutes => x,
                TimeUnit::Seconds => x.div_euclid(60),
                TimeUnit::Hours => x * 60,
            }),
            RawColumn::Float(v) => v[row].map(|x| {
                let m = match unit {
                    TimeUnit::Minutes => x,
                    TimeUnit::Seconds => x / 60.0,
                    TimeUnit::Hours => x * 60.0,
                };
                m.floor() as i64
            }),
            RawColumn::Text(_) => None,
        }
    }
}

/// A raw source table with columns addressed by their logical names.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawTable {
    pub name: String,
    pub columns: BTreeMap<String, RawColumn>,
}

impl RawTable {
    pub fn new(name: impl Into<String>) -> Self {
        RawTable {
            name: name.into(),
            columns: BTreeMap::new(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.columns.values().next().map_or(0, RawColumn::len)
    }

    pub fn column(&self, name: &str) -> Result<&RawColumn, HarmonizeError> {
        self.columns.get(name).ok_or_else(|| HarmonizeError::Table {
            table: self.name.clone(),
            message: format!("column `{name}` not loaded"),
        })
    }

    pub fn with_column(mut self, name: &str, col: RawColumn) -> Self {
        self.columns.insert(name.to_string(), col);
        self
    }

    /// Reads a headered CSV (gzip if the file name ends in `.gz`) using the
    /// declared column specs. Undeclared columns are ignored.
    pub fn read_csv(path: &Path, name: &str, spec: &TableSpec) -> Result<RawTable, HarmonizeError> {
        let display = path.display().to_string();
        let file = File::open(path).map_err(|source| HarmonizeError::Io {
            path: display.clone(),
            source,
        })?;
        let reader: Box<dyn Read> = if display.ends_with(".gz") {
            Box::new(GzDecoder::new(BufReader::new(file)))
        } else {
            Box::new(BufReader::new(file))
        };
        let csv_err = |source| HarmonizeError::Csv {
            path: display.clone(),
            source,
        };
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers().map_err(csv_err)?.clone();
        let mut slots = Vec::new();
        for (logical, col) in &spec.cols {
            let idx = headers.iter().position(|h| h == col.name).ok_or_else(|| HarmonizeError::Table {
                table: name.to_string(),
                message: format!("header `{}` (column `{logical}`) missing in {display}", col.name),
            })?;
            let empty = match col.spec {
                ColumnType::Integer | ColumnType::Logical => RawColumn::Int(Vec::new()),
                ColumnType::Double => RawColumn::Float(Vec::new()),
                ColumnType::Character => RawColumn::Text(Vec::new()),
                ColumnType::Datetime => RawColumn::Time(Vec::new()),
            };
            slots.push((logical.clone(), idx, col.spec, empty));
        }
        for (line, record) in rdr.records().enumerate() {
            let record = record.map_err(csv_err)?;
            for (logical, idx, ty, data) in slots.iter_mut() {
                let cell = record.get(*idx).unwrap_or("").trim();
                let bad = |what: &str| HarmonizeError::Table {
                    table: name.to_string(),
                    message: format!("row {}: `{cell}` is not a valid {what} for `{logical}`", line + 2),
                };
                let null = cell.is_empty() || cell == "NA";
                match (data, *ty) {
                    (RawColumn::Int(v), ColumnType::Integer) => {
                        v.push(if null { None } else { Some(cell.parse().map_err(|_| bad("integer"))?) })
                    }
                    (RawColumn::Int(v), _) => v.push(if null { None } else { Some(parse_logical(cell).ok_or_else(|| bad("logical"))?) }),
                    (RawColumn::Float(v), _) => {
                        v.push(if null { None } else { Some(cell.parse().map_err(|_| bad("number"))?) })
                    }
                    (RawColumn::Text(v), _) => v.push(if null { None } else { Some(cell.to_string()) }),
                    (RawColumn::Time(v), _) => {
                        v.push(if null { None } else { Some(parse_datetime(cell).ok_or_else(|| bad("datetime"))?) })
                    }
                }
            }
        }
        let mut table = RawTable::new(name);
        for (logical, _, _, data) in slots {
            table.columns.insert(logical, data);
        }
        Ok(table)
    }

    /// Writes the table as CSV with the raw header names of `spec`.
    pub fn write_csv(&self, path: &Path, spec: &TableSpec) -> Result<(), HarmonizeError> {
        let display = path.display().to_string();
        let io_err = |source| HarmonizeError::Io {
            path: display.clone(),
            source,
        };
        let file = File::create(path).map_err(io_err)?;
        let sink: Box<dyn Write> = if display.ends_with(".gz") {
            Box::new(GzEncoder::new(file, flate2::Compression::fast()))
        } else {
            Box::new(std::io::BufWriter::new(file))
        };
        let mut w = csv::Writer::from_writer(sink);
        let cols: Vec<(&String, &RawColumn)> = spec
            .cols
            .keys()
            .map(|k| self.column(k).map(|c| (k, c)))
            .collect::<Result<_, _>>()?;
        let csv_err = |source| HarmonizeError::Csv {
            path: display.clone(),
            source,
        };
        w.write_record(cols.iter().map(|(k, _)| spec.cols[*k].name.as_str()))
            .map_err(csv_err)?;
        let mut record = Vec::with_capacity(cols.len());
        for row in 0..self.n_rows() {
            record.clear();
            for (k, col) in &cols {
                let cell = match col {
                    RawColumn::Time(v) if spec.cols[*k].spec == ColumnType::Datetime => {
                        v[row].map(format_datetime).unwrap_or_default()
                    }
                    other => other.text(row).map(|c| c.into_owned()).unwrap_or_default(),
                };
                record.push(cell);
            }
            w.write_record(&record).map_err(csv_err)?;
        }
        w.flush().map_err(io_err)?;
        Ok(())
    }
}

fn parse_logical(cell: &str) -> Option<i64> {
    match cell {
        "TRUE" | "true" | "True" | "T" | "1" => Some(1),
        "FALSE" | "false" | "False" | "F" | "0" => Some(0),
        _ => None,
    }
}

fn parse_datetime(cell: &str) -> Option<i64> {
    const FORMATS: [&str; 3] = ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M"];
    let dt = FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(cell, f).ok())
        .or_else(|| {
            NaiveDate::parse_from_str(cell, "%Y-%m-%d")
                .ok()
                .and_then(|d| d.and_hms_opt(0, 0, 0))
        })?;
    Some(dt.and_utc().timestamp().div_euclid(60))
}

fn format_datetime(minutes: i64) -> String {
    chrono::DateTime::from_timestamp(minutes * 60, 0)
        .map(|d| d.naive_utc().format("%Y-%m-%d %H:%M:%S").to_string())
        .unwrap_or_default()
}

/// One ICU stay as declared by the `icustay` id level, in minutes on the
/// dataset's clock.
#[derive(Debug, Clone, PartialEq)]
pub struct StayRecord {
    pub stay_id: i64,
    pub patient_id: Option<i64>,
    pub admit: Option<i64>,
    pub discharge: Option<i64>,
}

impl StayRecord {
    /// Length of stay in minutes, when both bounds are known.
    pub fn los_minutes(&self) -> Option<i64> {
        Some(self.discharge? - self.admit?)
    }
}

/// A source configuration together with its loaded raw tables.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub cfg: SourceConfig,
    pub tables: HashMap<String, RawTable>,
}

pub const SOURCE_CONFIG_FILE: &str = "source.json";

impl Dataset {
    pub fn new(cfg: SourceConfig, tables: HashMap<String, RawTable>) -> Self {
        Dataset { cfg, tables }
    }

    /// Loads `source.json` and every declared table from `dir`.
    pub fn open(dir: &Path) -> Result<Dataset, HarmonizeError> {
        let path = dir.join(SOURCE_CONFIG_FILE);
        let text = std::fs::read_to_string(&path).map_err(|source| HarmonizeError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg = parse_source_config(&text)?;
        Self::load(dir, cfg)
    }

    pub fn load(dir: &Path, cfg: SourceConfig) -> Result<Dataset, HarmonizeError> {
        let mut tables = HashMap::new();
        for (name, spec) in &cfg.tables {
            tables.insert(name.clone(), RawTable::read_csv(&dir.join(&spec.files), name, spec)?);
        }
        Ok(Dataset { cfg, tables })
    }

    /// Writes `source.json` and all tables into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), HarmonizeError> {
        std::fs::create_dir_all(dir).map_err(|source| HarmonizeError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        let cfg = serde_json::to_string_pretty(&self.cfg).expect("source config serializes");
        let path = dir.join(SOURCE_CONFIG_FILE);
        std::fs::write(&path, cfg).map_err(|source| HarmonizeError::Io {
            path: path.display().to_string(),
            source,
        })?;
        for (name, spec) in &self.cfg.tables {
            self.table(name)?.write_csv(&dir.join(&spec.files), spec)?;
        }
        Ok(())
    }

    pub fn table(&self, name: &str) -> Result<&RawTable, HarmonizeError> {
        self.tables
            .get(name)
            .ok_or_else(|| HarmonizeError::MissingTable(name.to_string()))
    }

    pub fn stays(&self) -> Result<Vec<StayRecord>, HarmonizeError> {
        let level = self.cfg.icustay();
        let table = self.table(&level.table)?;
        let ids = table.column(&level.id)?;
        let patients = table.column(&self.cfg.patient().id)?;
        let start = table.column(&level.start)?;
        let end = level.end.as_deref().map(|e| table.column(e)).transpose()?;
        let unit = self.cfg.time_unit;
        let mut out = Vec::with_capacity(table.n_rows());
        for row in 0..table.n_rows() {
            let Some(stay_id) = ids.int(row) else { continue };
            out.push(StayRecord {
                stay_id,
                patient_id: patients.int(row),
                admit: start.minutes(row, unit),
                discharge: end.and_then(|c| c.minutes(row, unit)),
            });
        }
        out.sort_by_key(|s| s.stay_id);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harmonize::source::tests::SIC;

    #[test]
    fn csv_roundtrip_with_gzip_and_datetime() {
        let cfg = parse_source_config(SIC).unwrap();
        let spec = &cfg.tables["cases"];
        let table = RawTable::new("cases")
            .with_column("caseid", RawColumn::Int(vec![Some(1), Some(2)]))
            .with_column("patientid", RawColumn::Int(vec![Some(10), Some(11)]))
            .with_column("admissionyear", RawColumn::Int(vec![Some(2019), None]))
            .with_column("offsetafterfirstadmission", RawColumn::Int(vec![Some(0), Some(3600)]))
            .with_column("offsetofdeath", RawColumn::Int(vec![None, None]))
            .with_column("timeofstay", RawColumn::Int(vec![Some(86400), Some(90000)]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cases.csv.gz");
        table.write_csv(&path, spec).unwrap();
        let back = RawTable::read_csv(&path, "cases", spec).unwrap();
        assert_eq!(back, table);

        let mut tables = HashMap::new();
        tables.insert("cases".to_string(), back);
        let ds = Dataset::new(cfg, tables);
        let stays = ds.stays().unwrap();
        assert_eq!(stays[1].admit, Some(60));
        assert_eq!(stays[1].discharge, Some(1500));
    }

    #[test]
    fn datetime_cells_parse_to_minutes() {
        assert_eq!(parse_datetime("1970-01-01 01:00:00"), Some(60));
        assert_eq!(parse_datetime("1970-01-02"), Some(1440));
        assert_eq!(format_datetime(61), "1970-01-01 01:01:00");
        assert_eq!(parse_datetime("yesterday"), None);
    }

    #[test]
    fn seconds_floor_towards_negative_infinity() {
        let c = RawColumn::Int(vec![Some(-30), Some(59), Some(60)]);
        assert_eq!(c.minutes(0, TimeUnit::Seconds), Some(-1));
        assert_eq!(c.minutes(1, TimeUnit::Seconds), Some(0));
        assert_eq!(c.minutes(2, TimeUnit::Seconds), Some(1));
    }
}
