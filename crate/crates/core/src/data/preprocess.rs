use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::{BlockWidths, Modality, PerModality};

use super::schema::DatasetSchema;
use super::table::{Cell, RawTable};
use super::ModalityBundle;

/// Level used for missing categorical cells.
pub const MISSING_LEVEL: &str = "<missing>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnTransform {
    Numeric {
        median: f64,
        mean: f64,
        sd: f64,
    },
    /// Categories in first-appearance order; the reserved index for unseen
    /// levels is `categories.len()`.
    Categorical {
        categories: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedColumn {
    pub name: String,
    pub modality: Modality,
    pub transform: ColumnTransform,
}

impl FittedColumn {
    /// Encoded width: 1 for numeric columns, one indicator per category.
    pub fn width(&self) -> usize {
        match &self.transform {
            ColumnTransform::Numeric { .. } => 1,
            ColumnTransform::Categorical { categories } => categories.len(),
        }
    }

    /// Index of a category, or the reserved index for unseen levels.
    pub fn category_index(&self, value: &str) -> Option<usize> {
        match &self.transform {
            ColumnTransform::Categorical { categories } => Some(
                categories
                    .iter()
                    .position(|c| c == value)
                    .unwrap_or(categories.len()),
            ),
            ColumnTransform::Numeric { .. } => None,
        }
    }

    pub fn encoded_names(&self) -> Vec<String> {
        match &self.transform {
            ColumnTransform::Numeric { .. } => vec![self.name.clone()],
            ColumnTransform::Categorical { categories } => categories
                .iter()
                .map(|c| format!("{}={}", self.name, c))
                .collect(),
        }
    }

    fn encode(&self, cell: &Cell, out: &mut Vec<f64>) {
        match &self.transform {
            ColumnTransform::Numeric { median, mean, sd } => {
                let v = cell.as_number().unwrap_or(*median);
                out.push((v - mean) / sd);
            }
            ColumnTransform::Categorical { categories } => {
                let level = category_of(cell);
                let start = out.len();
                out.resize(start + categories.len(), 0.0);
                if let Some(i) = categories.iter().position(|c| c == level) {
                    out[start + i] = 1.0;
                }
            }
        }
    }
}

fn category_of(cell: &Cell) -> &str {
    match cell {
        Cell::Category(s) => s,
        Cell::Missing => MISSING_LEVEL,
        // A numeric-looking value in a categorical column keeps its spelling.
        Cell::Number(_) => "",
    }
}

fn category_string(cell: &Cell) -> String {
    match cell {
        Cell::Number(v) => v.to_string(),
        other => category_of(other).to_string(),
    }
}

/// Imputation, scaling and encoding statistics frozen from a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedPreprocessor {
    pub columns: Vec<FittedColumn>,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Fit per-column statistics on `table`. Medians use observed values only;
/// mean and population SD are computed after median imputation, and a zero
/// SD is stored as 1.
pub fn fit_preprocessor(table: &RawTable, schema: &DatasetSchema) -> Result<FittedPreprocessor> {
    if table.is_empty() {
        return Err(Error::Degenerate(
            "cannot fit a preprocessor on an empty table".into(),
        ));
    }
    let mut columns = Vec::with_capacity(schema.columns.len());
    for spec in &schema.columns {
        let idx = table
            .column_index(&spec.name)
            .ok_or_else(|| Error::MissingColumn(spec.name.clone()))?;
        let transform = if spec.categorical {
            let mut categories: Vec<String> = Vec::new();
            for cell in table.column(idx) {
                let level = category_string(cell);
                if !categories.contains(&level) {
                    categories.push(level);
                }
            }
            ColumnTransform::Categorical { categories }
        } else {
            let mut observed: Vec<f64> = table.column(idx).filter_map(Cell::as_number).collect();
            if observed.is_empty() {
                return Err(Error::AllMissing(spec.name.clone()));
            }
            observed.sort_by(f64::total_cmp);
            let med = median(&observed);
            let n = table.len() as f64;
            let values: Vec<f64> = table
                .column(idx)
                .map(|c| c.as_number().unwrap_or(med))
                .collect();
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let sd = var.sqrt();
            ColumnTransform::Numeric {
                median: med,
                mean,
                sd: if sd > 0.0 { sd } else { 1.0 },
            }
        };
        columns.push(FittedColumn {
            name: spec.name.clone(),
            modality: spec.modality,
            transform,
        });
    }
    Ok(FittedPreprocessor { columns })
}

impl FittedPreprocessor {
    pub fn fit(table: &RawTable, schema: &DatasetSchema) -> Result<Self> {
        fit_preprocessor(table, schema)
    }

    /// Encoded feature count per modality.
    pub fn widths(&self) -> BlockWidths {
        PerModality::from_fn(|m| {
            self.columns
                .iter()
                .filter(|c| c.modality == m)
                .map(FittedColumn::width)
                .sum()
        })
    }

    /// Encoded feature names per modality, matching bundle layout.
    pub fn feature_names(&self) -> PerModality<Vec<String>> {
        PerModality::from_fn(|m| {
            self.columns
                .iter()
                .filter(|c| c.modality == m)
                .flat_map(FittedColumn::encoded_names)
                .collect()
        })
    }

    pub fn column(&self, name: &str) -> Option<&FittedColumn> {
        self.columns.iter().find(|c| c.name == name)
    }

    /// Transform every row of `table` with the frozen statistics.
    pub fn apply(&self, table: &RawTable) -> Result<Vec<ModalityBundle>> {
        let fitted: HashMap<&str, usize> = self
            .columns
            .iter()
            .enumerate()
            .map(|(i, c)| (c.name.as_str(), i))
            .collect();
        if let Some(extra) = table
            .columns
            .iter()
            .find(|c| !fitted.contains_key(c.as_str()))
        {
            return Err(Error::Schema(format!(
                "column `{extra}` is not covered by the fitted preprocessor"
            )));
        }
        let table_idx: Vec<usize> = self
            .columns
            .iter()
            .map(|c| {
                table
                    .column_index(&c.name)
                    .ok_or_else(|| Error::MissingColumn(c.name.clone()))
            })
            .collect::<Result<_>>()?;

        let widths = self.widths();
        Ok(table
            .rows
            .iter()
            .map(|row| {
                let mut blocks = PerModality::from_fn(|m| Vec::with_capacity(widths[m]));
                for (col, &j) in self.columns.iter().zip(&table_idx) {
                    col.encode(&row.values[j], &mut blocks[col.modality]);
                }
                ModalityBundle::from_blocks(blocks, row.label, row.subject_id.clone())
            })
            .collect())
    }
}
