use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::{BlockWidths, Modality, PerModality};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub modality: Modality,
    #[serde(default)]
    pub categorical: bool,
}

/// Column-to-modality manifest for a tabular dataset.
///
/// Serialised as the JSON manifest that accompanies each CSV file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub label_column: String,
    pub subject_id_column: String,
    pub columns: Vec<ColumnSpec>,
    /// Raw label spellings mapped to class 1.
    #[serde(default = "default_positive")]
    pub positive_labels: Vec<String>,
    /// Raw label spellings mapped to class 0.
    #[serde(default = "default_negative")]
    pub negative_labels: Vec<String>,
}

fn default_positive() -> Vec<String> {
    vec!["1".into(), "PD".into()]
}

fn default_negative() -> Vec<String> {
    vec!["0".into(), "HC".into()]
}

impl DatasetSchema {
    pub fn new(
        label_column: impl Into<String>,
        subject_id_column: impl Into<String>,
        columns: Vec<ColumnSpec>,
    ) -> Result<Self> {
        let schema = DatasetSchema {
            label_column: label_column.into(),
            subject_id_column: subject_id_column.into(),
            columns,
            positive_labels: default_positive(),
            negative_labels: default_negative(),
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.label_column == self.subject_id_column {
            return Err(Error::Schema(
                "label and subject id columns must differ".into(),
            ));
        }
        let mut seen = BTreeSet::new();
        for col in &self.columns {
            if col.name == self.label_column || col.name == self.subject_id_column {
                return Err(Error::Schema(format!(
                    "column `{}` cannot be both a feature and the label/subject id",
                    col.name
                )));
            }
            if !seen.insert(col.name.as_str()) {
                return Err(Error::Schema(format!(
                    "column `{}` assigned more than once",
                    col.name
                )));
            }
        }
        for label in &self.positive_labels {
            if self.negative_labels.contains(label) {
                return Err(Error::Schema(format!(
                    "label value `{label}` maps to both classes"
                )));
            }
        }
        Ok(())
    }

    pub fn feature_names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|c| c.name.as_str())
    }

    pub fn columns_of(&self, m: Modality) -> impl Iterator<Item = &ColumnSpec> {
        self.columns.iter().filter(move |c| c.modality == m)
    }

    pub fn column(&self, name: &str) -> Option<&ColumnSpec> {
        self.columns.iter().find(|c| c.name == name)
    }

    /// Raw (pre-encoding) column count per modality.
    pub fn raw_widths(&self) -> BlockWidths {
        PerModality::from_fn(|m| self.columns_of(m).count())
    }

    pub fn map_label(&self, raw: &str) -> Option<u8> {
        let raw = raw.trim();
        if self.positive_labels.iter().any(|l| l == raw) {
            Some(1)
        } else if self.negative_labels.iter().any(|l| l == raw) {
            Some(0)
        } else {
            None
        }
    }

    pub fn label_text(&self, label: u8) -> &str {
        let list = if label == 1 {
            &self.positive_labels
        } else {
            &self.negative_labels
        };
        list.first()
            .map(String::as_str)
            .unwrap_or(if label == 1 { "1" } else { "0" })
    }

    /// Copy of the schema with the named columns removed.
    pub fn without_columns(&self, dropped: &[String]) -> Self {
        let dropped: BTreeSet<&str> = dropped.iter().map(String::as_str).collect();
        DatasetSchema {
            columns: self
                .columns
                .iter()
                .filter(|c| !dropped.contains(c.name.as_str()))
                .cloned()
                .collect(),
            ..self.clone()
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let schema: DatasetSchema = serde_json::from_str(&text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(name: &str, modality: Modality) -> ColumnSpec {
        ColumnSpec {
            name: name.into(),
            modality,
            categorical: false,
        }
    }

    #[test]
    fn rejects_label_as_feature() {
        let err = DatasetSchema::new("y", "id", vec![spec("y", Modality::Clinical)]);
        assert!(matches!(err, Err(Error::Schema(_))));
    }

    #[test]
    fn rejects_double_assignment() {
        let err = DatasetSchema::new(
            "y",
            "id",
            vec![spec("a", Modality::Clinical), spec("a", Modality::MriCt)],
        );
        assert!(matches!(err, Err(Error::Schema(_))));
    }

    #[test]
    fn manifest_json_roundtrip() {
        let schema = DatasetSchema::new(
            "y",
            "id",
            vec![spec("a", Modality::Clinical), spec("b", Modality::MriVol)],
        )
        .unwrap();
        let text = serde_json::to_string(&schema).unwrap();
        assert!(text.contains("\"mri_vol\""));
        let back: DatasetSchema = serde_json::from_str(&text).unwrap();
        assert_eq!(back, schema);
    }

    #[test]
    fn label_mapping_defaults() {
        let schema = DatasetSchema::new("y", "id", vec![]).unwrap();
        assert_eq!(schema.map_label("PD"), Some(1));
        assert_eq!(schema.map_label(" 0 "), Some(0));
        assert_eq!(schema.map_label("maybe"), None);
    }
}
