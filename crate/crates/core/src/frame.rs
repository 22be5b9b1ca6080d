//! Small column-oriented table used for cohort tables and preprocessing.
//!
//! Key columns (stay id, hour) are non-nullable integers; everything else is a
//! nullable float where `None` marks a missing value.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "values", rename_all = "lowercase")]
pub enum ColumnData {
    Int(Vec<i64>),
    Float(Vec<Option<f64>>),
}

impl ColumnData {
    pub fn len(&self) -> usize {
        match self {
            ColumnData::Int(v) => v.len(),
            ColumnData::Float(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn take(&self, rows: &[usize]) -> ColumnData {
        match self {
            ColumnData::Int(v) => ColumnData::Int(rows.iter().map(|&r| v[r]).collect()),
            ColumnData::Float(v) => ColumnData::Float(rows.iter().map(|&r| v[r]).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub data: ColumnData,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FrameError {
    #[error("column `{0}` not found")]
    MissingColumn(String),
    #[error("column `{0}` already exists")]
    DuplicateColumn(String),
    #[error("column `{name}` has {got} rows, expected {expected}")]
    Length {
        name: String,
        got: usize,
        expected: usize,
    },
    #[error("column `{0}` has the wrong type")]
    Type(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    columns: Vec<Column>,
}

impl Frame {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn n_rows(&self) -> usize {
        self.columns.first().map_or(0, |c| c.data.len())
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|c| c.name.as_str())
    }

    pub fn has(&self, name: &str) -> bool {
        self.position(name).is_some()
    }

    fn position(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn push(&mut self, name: impl Into<String>, data: ColumnData) -> Result<(), FrameError> {
        let name = name.into();
        if self.has(&name) {
            return Err(FrameError::DuplicateColumn(name));
        }
        if !self.columns.is_empty() && data.len() != self.n_rows() {
            return Err(FrameError::Length {
                name,
                got: data.len(),
                expected: self.n_rows(),
            });
        }
        self.columns.push(Column { name, data });
        Ok(())
    }

    /// Replaces an existing column or appends a new one.
    pub fn set(&mut self, name: &str, data: ColumnData) -> Result<(), FrameError> {
        match self.position(name) {
            Some(i) => {
                if data.len() != self.n_rows() {
                    return Err(FrameError::Length {
                        name: name.to_string(),
                        got: data.len(),
                        expected: self.n_rows(),
                    });
                }
                self.columns[i].data = data;
                Ok(())
            }
            None => self.push(name, data),
        }
    }

    pub fn column(&self, name: &str) -> Result<&ColumnData, FrameError> {
        self.columns
            .iter()
            .find(|c| c.name == name)
            .map(|c| &c.data)
            .ok_or_else(|| FrameError::MissingColumn(name.to_string()))
    }

    pub fn int(&self, name: &str) -> Result<&[i64], FrameError> {
        match self.column(name)? {
            ColumnData::Int(v) => Ok(v),
            ColumnData::Float(_) => Err(FrameError::Type(name.to_string())),
        }
    }

    pub fn float(&self, name: &str) -> Result<&[Option<f64>], FrameError> {
        match self.column(name)? {
            ColumnData::Float(v) => Ok(v),
            ColumnData::Int(_) => Err(FrameError::Type(name.to_string())),
        }
    }

    pub fn float_mut(&mut self, name: &str) -> Result<&mut Vec<Option<f64>>, FrameError> {
        let i = self
            .position(name)
            .ok_or_else(|| FrameError::MissingColumn(name.to_string()))?;
        match &mut self.columns[i].data {
            ColumnData::Float(v) => Ok(v),
            ColumnData::Int(_) => Err(FrameError::Type(name.to_string())),
        }
    }

    /// Column values as floats, with integer columns converted.
    pub fn values_f64(&self, name: &str) -> Result<Vec<Option<f64>>, FrameError> {
        Ok(match self.column(name)? {
            ColumnData::Int(v) => v.iter().map(|&x| Some(x as f64)).collect(),
            ColumnData::Float(v) => v.clone(),
        })
    }

    pub fn take_rows(&self, rows: &[usize]) -> Frame {
        Frame {
            columns: self
                .columns
                .iter()
                .map(|c| Column {
                    name: c.name.clone(),
                    data: c.data.take(rows),
                })
                .collect(),
        }
    }

    /// Keeps rows whose value in the integer column `key` satisfies `keep`.
    pub fn filter_by_key(&self, key: &str, keep: impl Fn(i64) -> bool) -> Result<Frame, FrameError> {
        let ids = self.int(key)?;
        let rows: Vec<usize> = (0..ids.len()).filter(|&i| keep(ids[i])).collect();
        Ok(self.take_rows(&rows))
    }

    /// Reorders columns to `order`; every name must exist.
    pub fn reorder(&self, order: &[&str]) -> Result<Frame, FrameError> {
        let mut columns = Vec::with_capacity(order.len());
        for name in order {
            let i = self
                .position(name)
                .ok_or_else(|| FrameError::MissingColumn(name.to_string()))?;
            columns.push(self.columns[i].clone());
        }
        Ok(Frame { columns })
    }

    /// Vertically stacks frames with identical schemas.
    pub fn concat(frames: &[Frame]) -> Result<Frame, FrameError> {
        let Some(first) = frames.first() else {
            return Ok(Frame::new());
        };
        let mut out = first.clone();
        for f in &frames[1..] {
            for col in out.columns.iter_mut() {
                match (&mut col.data, f.column(&col.name)?) {
                    (ColumnData::Int(a), ColumnData::Int(b)) => a.extend_from_slice(b),
                    (ColumnData::Float(a), ColumnData::Float(b)) => a.extend_from_slice(b),
                    _ => return Err(FrameError::Type(col.name.clone())),
                }
            }
        }
        Ok(out)
    }

    /// Row ranges of consecutive equal values in an integer key column.
    pub fn group_ranges(&self, key: &str) -> Result<Vec<(i64, std::ops::Range<usize>)>, FrameError> {
        let ids = self.int(key)?;
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=ids.len() {
            if i == ids.len() || ids[i] != ids[start] {
                if i > start {
                    out.push((ids[start], start..i));
                }
                start = i;
            }
        }
        Ok(out)
    }

    /// Sorts rows by the given integer key columns.
    pub fn sort_by_keys(&self, keys: &[&str]) -> Result<Frame, FrameError> {
        let cols: Vec<&[i64]> = keys.iter().map(|k| self.int(k)).collect::<Result<_, _>>()?;
        let mut rows: Vec<usize> = (0..self.n_rows()).collect();
        rows.sort_by(|&a, &b| {
            cols.iter()
                .map(|c| c[a].cmp(&c[b]))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        Ok(self.take_rows(&rows))
    }

    pub fn count_missing(&self) -> usize {
        self.columns
            .iter()
            .map(|c| match &c.data {
                ColumnData::Float(v) => v.iter().filter(|x| x.is_none()).count(),
                ColumnData::Int(_) => 0,
            })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Frame {
        let mut f = Frame::new();
        f.push("stay_id", ColumnData::Int(vec![2, 1, 1])).unwrap();
        f.push("time", ColumnData::Int(vec![0, 1, 0])).unwrap();
        f.push("hr", ColumnData::Float(vec![Some(80.0), None, Some(70.0)]))
            .unwrap();
        f
    }

    #[test]
    fn length_mismatch_rejected() {
        let mut f = sample();
        let err = f.push("x", ColumnData::Float(vec![None])).unwrap_err();
        assert!(matches!(err, FrameError::Length { .. }));
    }

    #[test]
    fn sort_and_group() {
        let f = sample().sort_by_keys(&["stay_id", "time"]).unwrap();
        assert_eq!(f.int("stay_id").unwrap(), &[1, 1, 2]);
        assert_eq!(f.int("time").unwrap(), &[0, 1, 0]);
        assert_eq!(f.float("hr").unwrap(), &[Some(70.0), None, Some(80.0)]);
        let groups = f.group_ranges("stay_id").unwrap();
        assert_eq!(groups, vec![(1, 0..2), (2, 2..3)]);
        assert_eq!(f.count_missing(), 1);
    }
}
