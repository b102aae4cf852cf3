use std::collections::HashSet;
use std::fs::File;
use std::path::Path;

use crate::error::{Error, Result};

use super::schema::DatasetSchema;

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Missing,
    Number(f64),
    Category(String),
}

impl Cell {
    pub fn is_missing(&self) -> bool {
        matches!(self, Cell::Missing)
    }

    pub fn as_number(&self) -> Option<f64> {
        match self {
            Cell::Number(v) => Some(*v),
            _ => None,
        }
    }

    fn to_field(&self) -> String {
        match self {
            Cell::Missing => String::new(),
            Cell::Number(v) => v.to_string(),
            Cell::Category(s) => s.clone(),
        }
    }
}

/// One row: subject, label and feature cells in `RawTable::columns` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub subject_id: String,
    pub label: u8,
    pub values: Vec<Cell>,
}

/// Parsed but unprocessed table. Subject ids may repeat across rows.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub columns: Vec<String>,
    pub rows: Vec<Record>,
}

impl RawTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn column(&self, idx: usize) -> impl Iterator<Item = &Cell> + '_ {
        self.rows.iter().map(move |r| &r.values[idx])
    }

    pub fn labels(&self) -> Vec<u8> {
        self.rows.iter().map(|r| r.label).collect()
    }

    pub fn subject_ids(&self) -> Vec<&str> {
        self.rows.iter().map(|r| r.subject_id.as_str()).collect()
    }

    /// Rows at the given indices, in that order.
    pub fn select(&self, indices: &[usize]) -> RawTable {
        RawTable {
            columns: self.columns.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    /// Keep only the named columns, in the given order.
    pub fn project<S: AsRef<str>>(&self, names: &[S]) -> Result<RawTable> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| {
                self.column_index(n.as_ref())
                    .ok_or_else(|| Error::MissingColumn(n.as_ref().to_string()))
            })
            .collect::<Result<_>>()?;
        Ok(RawTable {
            columns: idx.iter().map(|&j| self.columns[j].clone()).collect(),
            rows: self
                .rows
                .iter()
                .map(|r| Record {
                    subject_id: r.subject_id.clone(),
                    label: r.label,
                    values: idx.iter().map(|&j| r.values[j].clone()).collect(),
                })
                .collect(),
        })
    }

    pub fn missing_fraction(&self, idx: usize) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        let missing = self.column(idx).filter(|c| c.is_missing()).count();
        missing as f64 / self.rows.len() as f64
    }

    /// Write the table as CSV: subject id, label, then feature columns.
    pub fn write_csv(&self, schema: &DatasetSchema, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = csv::Writer::from_writer(file);
        let mut header = vec![
            schema.subject_id_column.as_str(),
            schema.label_column.as_str(),
        ];
        header.extend(self.columns.iter().map(String::as_str));
        writer.write_record(&header)?;
        for row in &self.rows {
            let mut fields = vec![
                row.subject_id.clone(),
                schema.label_text(row.label).to_string(),
            ];
            fields.extend(row.values.iter().map(Cell::to_field));
            writer.write_record(&fields)?;
        }
        writer.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn is_missing_token(s: &str) -> bool {
    matches!(s, "" | "NA" | "NaN" | "nan" | "null")
}

/// Parse a CSV file against `schema`. Columns not named in the schema are
/// ignored; feature columns are kept in schema order.
pub fn load_csv(path: impl AsRef<Path>, schema: &DatasetSchema) -> Result<RawTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema)
}

pub(crate) fn read_csv<R: std::io::Read>(reader: R, schema: &DatasetSchema) -> Result<RawTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let header: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut seen = HashSet::new();
    for h in &header {
        if !seen.insert(h.as_str()) {
            return Err(Error::DuplicateColumn(h.clone()));
        }
    }
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let label_idx = find(&schema.label_column)?;
    let id_idx = find(&schema.subject_id_column)?;
    let feature_idx: Vec<usize> = schema
        .columns
        .iter()
        .map(|c| find(&c.name))
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for (row_no, record) in reader.records().enumerate() {
        let record = record?;
        let raw_label = record.get(label_idx).unwrap_or("");
        let label = schema
            .map_label(raw_label)
            .ok_or_else(|| Error::InvalidLabel {
                row: row_no,
                value: raw_label.to_string(),
            })?;
        let subject_id = record.get(id_idx).unwrap_or("").trim().to_string();
        let mut values = Vec::with_capacity(feature_idx.len());
        for (spec, &idx) in schema.columns.iter().zip(&feature_idx) {
            let raw = record.get(idx).unwrap_or("").trim();
            let cell = if is_missing_token(raw) {
                Cell::Missing
            } else if spec.categorical {
                Cell::Category(raw.to_string())
            } else {
                let v: f64 = raw.parse().map_err(|_| Error::InvalidNumber {
                    row: row_no,
                    column: spec.name.clone(),
                    value: raw.to_string(),
                })?;
                if v.is_finite() {
                    Cell::Number(v)
                } else {
                    Cell::Missing
                }
            };
            values.push(cell);
        }
        rows.push(Record {
            subject_id,
            label,
            values,
        });
    }
    Ok(RawTable {
        columns: schema.columns.iter().map(|c| c.name.clone()).collect(),
        rows,
    })
}

/// Remove every column whose missing fraction strictly exceeds `threshold`.
/// Returns the reduced table and the dropped column names in table order.
pub fn drop_high_missingness(table: &RawTable, threshold: f64) -> (RawTable, Vec<String>) {
    let keep: Vec<usize> = (0..table.columns.len())
        .filter(|&j| table.missing_fraction(j) <= threshold)
        .collect();
    let dropped = (0..table.columns.len())
        .filter(|j| !keep.contains(j))
        .map(|j| table.columns[j].clone())
        .collect();
    let reduced = RawTable {
        columns: keep.iter().map(|&j| table.columns[j].clone()).collect(),
        rows: table
            .rows
            .iter()
            .map(|r| Record {
                subject_id: r.subject_id.clone(),
                label: r.label,
                values: keep.iter().map(|&j| r.values[j].clone()).collect(),
            })
            .collect(),
    };
    (reduced, dropped)
}
