#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safn_core::data::ModalityBundle;
use safn_core::model::{SafnConfig, Wiring};
use safn_core::{BlockWidths, PerModality};

/// D=8, 2 heads, 1 layer, no dropout.
pub fn tiny_config() -> SafnConfig {
    SafnConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        dropout: 0.0,
        ffn_multiplier: 4,
        head_hidden: 8,
        wiring: Wiring::default(),
    }
}

/// cortical thickness 3, volumetric 2, clinical 4, demographic 2.
pub fn tiny_widths() -> BlockWidths {
    PerModality {
        mri_ct: 3,
        clinical: 4,
        mri_vol: 2,
        demographic: 2,
    }
}

pub fn random_bundle(widths: &BlockWidths, label: u8, rng: &mut ChaCha8Rng) -> ModalityBundle {
    let blocks = PerModality::from_fn(|m| {
        (0..widths[m])
            .map(|_| rng.random_range(-2.0..2.0))
            .collect::<Vec<f64>>()
    });
    ModalityBundle::from_blocks(blocks, label, format!("s{}", rng.random::<u32>()))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Small cohort with the signal in a few clinical columns.
pub fn small_cohort(
    n_pd: usize,
    n_hc: usize,
    clinical_effect: f64,
    seed: u64,
) -> safn_core::data::GeneratedDataset {
    use safn_core::data::{generate_synthetic, GeneratorConfig, ModalityEffect};
    let config = GeneratorConfig {
        n_pd,
        n_hc,
        widths: PerModality {
            mri_ct: 6,
            clinical: 10,
            mri_vol: 3,
            demographic: 3,
        },
        effects: PerModality {
            mri_ct: ModalityEffect::NONE,
            clinical: ModalityEffect::new(clinical_effect, 0.3),
            mri_vol: ModalityEffect::NONE,
            demographic: ModalityEffect::NONE,
        },
        missing_rate: 0.02,
        repeat_visit_rate: 0.0,
    };
    generate_synthetic(&config, seed).unwrap()
}

/// Fit preprocessing on the first `n_train` rows and encode both parts.
pub fn encoded_split(
    data: &safn_core::data::GeneratedDataset,
    n_train: usize,
) -> (Vec<ModalityBundle>, Vec<ModalityBundle>) {
    use safn_core::data::FittedPreprocessor;
    let n = data.table.len();
    let train = data.table.select(&(0..n_train).collect::<Vec<_>>());
    let val = data.table.select(&(n_train..n).collect::<Vec<_>>());
    let prep = FittedPreprocessor::fit(&train, &data.schema).unwrap();
    (prep.apply(&train).unwrap(), prep.apply(&val).unwrap())
}
