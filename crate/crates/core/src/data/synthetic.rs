use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::{BlockWidths, Modality, PerModality};
use crate::rng;

use super::schema::{ColumnSpec, DatasetSchema};
use super::table::{Cell, RawTable, Record};

/// Standardised mean shift applied to cases on a fraction of a block's columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalityEffect {
    pub effect_size: f64,
    pub informative_fraction: f64,
}

impl ModalityEffect {
    pub const NONE: ModalityEffect = ModalityEffect {
        effect_size: 0.0,
        informative_fraction: 0.0,
    };

    pub fn new(effect_size: f64, informative_fraction: f64) -> Self {
        ModalityEffect {
            effect_size,
            informative_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n_pd: usize,
    pub n_hc: usize,
    pub widths: BlockWidths,
    pub effects: PerModality<ModalityEffect>,
    pub missing_rate: f64,
    pub repeat_visit_rate: f64,
}

impl Default for GeneratorConfig {
    /// Cohort-shaped defaults: 570 cases, 133 controls, 499 features, with
    /// the signal concentrated in the clinical block.
    fn default() -> Self {
        GeneratorConfig {
            n_pd: 570,
            n_hc: 133,
            widths: BlockWidths::cohort(),
            effects: PerModality {
                mri_ct: ModalityEffect::new(0.3, 0.1),
                clinical: ModalityEffect::new(1.0, 0.2),
                mri_vol: ModalityEffect::new(0.3, 0.2),
                demographic: ModalityEffect::new(0.2, 0.3),
            },
            missing_rate: 0.02,
            repeat_visit_rate: 0.0,
        }
    }
}

impl GeneratorConfig {
    fn validate(&self) -> Result<()> {
        if self.n_pd == 0 || self.n_hc == 0 {
            return Err(Error::Config("class counts must be positive".into()));
        }
        for (m, e) in self.effects.iter() {
            if !(0.0..=1.0).contains(&e.informative_fraction) {
                return Err(Error::Config(format!(
                    "{m}: informative fraction {} outside [0, 1]",
                    e.informative_fraction
                )));
            }
            if !e.effect_size.is_finite() {
                return Err(Error::Config(format!("{m}: effect size must be finite")));
            }
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::Config("missing rate must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.repeat_visit_rate) {
            return Err(Error::Config("repeat-visit rate must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub table: RawTable,
    pub schema: DatasetSchema,
    /// Columns carrying the case/control shift.
    pub informative: Vec<String>,
}

const DEMOGRAPHIC_NAMES: [(&str, bool); 7] = [
    ("age", false),
    ("sex", true),
    ("education_years", false),
    ("handedness", true),
    ("race", true),
    ("bmi", false),
    ("family_history", true),
];

enum Kind {
    /// value = loc + scale * z
    Numeric { loc: f64, scale: f64 },
    /// latent z binned at normal quantile cut points
    Categorical {
        levels: Vec<&'static str>,
        cuts: Vec<f64>,
    },
}

struct ColumnPlan {
    spec: ColumnSpec,
    kind: Kind,
    shift: f64,
}

fn categorical_kind(name: &str) -> Kind {
    // cut points are standard-normal quantiles of the base level frequencies
    match name {
        "sex" => Kind::Categorical {
            levels: vec!["M", "F"],
            cuts: vec![0.25],
        },
        "handedness" => Kind::Categorical {
            levels: vec!["R", "L", "Mixed"],
            cuts: vec![1.2816, 2.0537],
        },
        "race" => Kind::Categorical {
            levels: vec!["White", "Black", "Asian", "Other"],
            cuts: vec![1.2816, 1.6449, 2.0537],
        },
        _ => Kind::Categorical {
            levels: vec!["N", "Y"],
            cuts: vec![0.8416],
        },
    }
}

fn numeric_kind(name: &str, rng: &mut ChaCha8Rng) -> Kind {
    match name {
        "age" => Kind::Numeric {
            loc: 62.0,
            scale: 9.5,
        },
        "education_years" => Kind::Numeric {
            loc: 15.5,
            scale: 3.0,
        },
        "bmi" => Kind::Numeric {
            loc: 26.5,
            scale: 4.2,
        },
        _ if name.starts_with("ct_") => Kind::Numeric {
            loc: rng.random_range(2.0..3.2),
            scale: rng.random_range(0.1..0.3),
        },
        _ if name.starts_with("vol_") => Kind::Numeric {
            loc: rng.random_range(1_000.0..20_000.0),
            scale: rng.random_range(100.0..2_000.0),
        },
        _ => Kind::Numeric {
            loc: rng.random_range(-2.0..10.0),
            scale: rng.random_range(0.5..3.0),
        },
    }
}

fn column_names(m: Modality, width: usize) -> Vec<(String, bool)> {
    match m {
        Modality::MriCt => (0..width).map(|i| (format!("ct_{i:03}"), false)).collect(),
        Modality::MriVol => (0..width).map(|i| (format!("vol_{i:02}"), false)).collect(),
        Modality::Clinical => (0..width)
            .map(|i| (format!("clin_{i:03}"), false))
            .collect(),
        Modality::Demographic => (0..width)
            .map(|i| match DEMOGRAPHIC_NAMES.get(i) {
                Some(&(name, cat)) => (name.to_string(), cat),
                None => (format!("demo_{i:02}"), false),
            })
            .collect(),
    }
}

/// Draw a synthetic cohort with the configured imbalance and separability.
///
/// Every numeric column is an independent Gaussian; categorical demographics
/// bin a latent Gaussian. Cases receive `effect_size` standard deviations of
/// shift (random sign) on a seeded subset of each block's columns.
pub fn generate_synthetic(config: &GeneratorConfig, seed: u64) -> Result<GeneratedDataset> {
    config.validate()?;
    let mut layout_rng = rng::stream(seed, &[0x5C4E]);

    let mut plans: Vec<ColumnPlan> = Vec::new();
    let mut informative = Vec::new();
    for m in Modality::ALL {
        let names = column_names(m, config.widths[m]);
        let effect = config.effects[m];
        let n_inf = (effect.informative_fraction * names.len() as f64).round() as usize;
        let mut positions: Vec<usize> = (0..names.len()).collect();
        positions.shuffle(&mut layout_rng);
        let chosen = &positions[..n_inf.min(names.len())];
        for (i, (name, categorical)) in names.into_iter().enumerate() {
            let kind = if categorical {
                categorical_kind(&name)
            } else {
                numeric_kind(&name, &mut layout_rng)
            };
            let shift = if chosen.contains(&i) && effect.effect_size != 0.0 {
                informative.push(name.clone());
                let sign = if layout_rng.random_bool(0.5) {
                    1.0
                } else {
                    -1.0
                };
                sign * effect.effect_size
            } else {
                0.0
            };
            plans.push(ColumnPlan {
                spec: ColumnSpec {
                    name,
                    modality: m,
                    categorical,
                },
                kind,
                shift,
            });
        }
    }

    let mut labels: Vec<u8> = std::iter::repeat_n(1u8, config.n_pd)
        .chain(std::iter::repeat_n(0u8, config.n_hc))
        .collect();
    let mut row_rng = rng::stream(seed, &[0xD474]);
    labels.shuffle(&mut row_rng);

    let mut subjects: [Vec<String>; 2] = [Vec::new(), Vec::new()];
    let mut next_id = 0usize;
    let mut rows = Vec::with_capacity(labels.len());
    for &label in &labels {
        let pool = &mut subjects[label as usize];
        let subject_id = if !pool.is_empty() && row_rng.random_bool(config.repeat_visit_rate) {
            pool[row_rng.random_range(0..pool.len())].clone()
        } else {
            next_id += 1;
            let id = format!("SUBJ{next_id:05}");
            pool.push(id.clone());
            id
        };
        let values = plans
            .iter()
            .map(|plan| {
                let z: f64 = StandardNormal.sample(&mut row_rng);
                let z = z + if label == 1 { plan.shift } else { 0.0 };
                if row_rng.random_bool(config.missing_rate) {
                    return Cell::Missing;
                }
                match &plan.kind {
                    Kind::Numeric { loc, scale } => Cell::Number(loc + scale * z),
                    Kind::Categorical { levels, cuts } => {
                        let level = cuts.iter().take_while(|&&c| z > c).count();
                        Cell::Category(levels[level].to_string())
                    }
                }
            })
            .collect();
        rows.push(Record {
            subject_id,
            label,
            values,
        });
    }

    let schema = DatasetSchema::new(
        "diagnosis",
        "subject_id",
        plans.iter().map(|p| p.spec.clone()).collect(),
    )?;
    let table = RawTable {
        columns: plans.iter().map(|p| p.spec.name.clone()).collect(),
        rows,
    };
    Ok(GeneratedDataset {
        table,
        schema,
        informative,
    })
}
