use std::fmt;
use std::ops::{Index, IndexMut};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The four input blocks, listed in fusion order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    MriCt,
    Clinical,
    MriVol,
    Demographic,
}

impl Modality {
    /// Fusion order: cortical thickness, clinical, volumetric, demographic.
    pub const ALL: [Modality; 4] = [
        Modality::MriCt,
        Modality::Clinical,
        Modality::MriVol,
        Modality::Demographic,
    ];

    pub fn index(self) -> usize {
        match self {
            Modality::MriCt => 0,
            Modality::Clinical => 1,
            Modality::MriVol => 2,
            Modality::Demographic => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::MriCt => "mri_ct",
            Modality::Clinical => "clinical",
            Modality::MriVol => "mri_vol",
            Modality::Demographic => "demographic",
        }
    }

    /// Human-readable label used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            Modality::MriCt => "MRI Cortical Thickness",
            Modality::Clinical => "Clinical",
            Modality::MriVol => "MRI Volumetric",
            Modality::Demographic => "Demographic",
        }
    }

    /// Cortical thickness and clinical features are tokenized and run through
    /// transformer encoders; the other two go through small MLPs.
    pub fn is_tokenized(self) -> bool {
        matches!(self, Modality::MriCt | Modality::Clinical)
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mri_ct" => Ok(Modality::MriCt),
            "clinical" | "clin" => Ok(Modality::Clinical),
            "mri_vol" => Ok(Modality::MriVol),
            "demographic" | "demo" => Ok(Modality::Demographic),
            other => Err(format!("unknown modality `{other}`")),
        }
    }
}

/// One value per modality, addressable by [`Modality`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PerModality<T> {
    pub mri_ct: T,
    pub clinical: T,
    pub mri_vol: T,
    pub demographic: T,
}

impl<T> PerModality<T> {
    pub fn from_fn(mut f: impl FnMut(Modality) -> T) -> Self {
        PerModality {
            mri_ct: f(Modality::MriCt),
            clinical: f(Modality::Clinical),
            mri_vol: f(Modality::MriVol),
            demographic: f(Modality::Demographic),
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(Modality, &T) -> U) -> PerModality<U> {
        PerModality::from_fn(|m| f(m, &self[m]))
    }

    pub fn iter(&self) -> impl Iterator<Item = (Modality, &T)> {
        Modality::ALL.into_iter().map(move |m| (m, &self[m]))
    }
}

impl<T> Index<Modality> for PerModality<T> {
    type Output = T;

    fn index(&self, m: Modality) -> &T {
        match m {
            Modality::MriCt => &self.mri_ct,
            Modality::Clinical => &self.clinical,
            Modality::MriVol => &self.mri_vol,
            Modality::Demographic => &self.demographic,
        }
    }
}

impl<T> IndexMut<Modality> for PerModality<T> {
    fn index_mut(&mut self, m: Modality) -> &mut T {
        match m {
            Modality::MriCt => &mut self.mri_ct,
            Modality::Clinical => &mut self.clinical,
            Modality::MriVol => &mut self.mri_vol,
            Modality::Demographic => &mut self.demographic,
        }
    }
}

/// Feature count per modality block.
pub type BlockWidths = PerModality<usize>;

impl BlockWidths {
    /// Cohort block widths: 70 cortical thickness, 409 clinical,
    /// 13 volumetric and 7 demographic features.
    pub fn cohort() -> Self {
        PerModality {
            mri_ct: 70,
            clinical: 409,
            mri_vol: 13,
            demographic: 7,
        }
    }

    pub fn total(&self) -> usize {
        self.mri_ct + self.clinical + self.mri_vol + self.demographic
    }
}
