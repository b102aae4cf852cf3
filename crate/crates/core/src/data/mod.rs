//! Dataset loading, preprocessing, fold planning and synthetic generation.

mod folds;
mod preprocess;
mod schema;
mod synthetic;
mod table;

pub use folds::{make_folds, FoldPlan};
pub use preprocess::{
    fit_preprocessor, ColumnTransform, FittedColumn, FittedPreprocessor, MISSING_LEVEL,
};
pub use schema::{ColumnSpec, DatasetSchema};
pub use synthetic::{generate_synthetic, GeneratedDataset, GeneratorConfig, ModalityEffect};
pub use table::{drop_high_missingness, load_csv, Cell, RawTable, Record};

use crate::modality::{BlockWidths, Modality, PerModality};

/// One subject-visit after preprocessing: four standardised feature blocks,
/// the class label (0 = control, 1 = case) and the subject identifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityBundle {
    pub x_mri_ct: Vec<f64>,
    pub x_clinical: Vec<f64>,
    pub x_mri_vol: Vec<f64>,
    pub x_demographic: Vec<f64>,
    pub label: u8,
    pub subject_id: String,
}

impl ModalityBundle {
    pub fn from_blocks(blocks: PerModality<Vec<f64>>, label: u8, subject_id: String) -> Self {
        ModalityBundle {
            x_mri_ct: blocks.mri_ct,
            x_clinical: blocks.clinical,
            x_mri_vol: blocks.mri_vol,
            x_demographic: blocks.demographic,
            label,
            subject_id,
        }
    }

    pub fn block(&self, m: Modality) -> &[f64] {
        match m {
            Modality::MriCt => &self.x_mri_ct,
            Modality::Clinical => &self.x_clinical,
            Modality::MriVol => &self.x_mri_vol,
            Modality::Demographic => &self.x_demographic,
        }
    }

    pub fn block_mut(&mut self, m: Modality) -> &mut Vec<f64> {
        match m {
            Modality::MriCt => &mut self.x_mri_ct,
            Modality::Clinical => &mut self.x_clinical,
            Modality::MriVol => &mut self.x_mri_vol,
            Modality::Demographic => &mut self.x_demographic,
        }
    }

    pub fn widths(&self) -> BlockWidths {
        PerModality::from_fn(|m| self.block(m).len())
    }

    /// All features concatenated in fusion order.
    pub fn concatenated(&self) -> Vec<f64> {
        Modality::ALL
            .iter()
            .flat_map(|&m| self.block(m).iter().copied())
            .collect()
    }
}
