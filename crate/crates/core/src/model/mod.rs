//! The fusion network: feature tokenizers and transformer encoders for the
//! cortical-thickness and clinical streams, symmetric cross-attention between
//! them, attention pooling, MLP encoders for the volumetric and demographic
//! streams, sigmoid modality gates and the classification head.
//!
//! Everything runs in `f64` with hand-written backward passes so gradients
//! can be checked against finite differences.

mod attention;
mod config;
mod layout;
mod network;
pub mod ops;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use attention::{
    attention_backward, attention_forward, attention_pool, attention_pool_backward, block_backward,
    block_forward, AttentionCache, BlockCache,
};
pub use config::{SafnConfig, Wiring};
pub use layout::{
    AttentionParams, BlockParams, GateParams, HeadParams, Init, LayerNormParams, LayoutEntry,
    Linear, MlpStreamParams, SafnLayout, StreamParams, TensorRef, TokenStreamParams,
};
pub use network::{gate_and_fuse, tokenize, ForwardTrace, OutputGrad, Safn};

use crate::data::FittedPreprocessor;
use crate::error::{Error, Result};
use crate::modality::BlockWidths;

/// Parameter count from the architecture formula, independent of the layout
/// builder.
pub fn expected_param_count(config: &SafnConfig, widths: &BlockWidths) -> usize {
    let d = config.d_model;
    let ffn = config.ffn_width();
    let block = 4 * (d * d + d) + 2 * (2 * d) + (d * ffn + ffn) + (ffn * d + d);
    let active = config.wiring.active_modalities();
    let m = active.len();
    let streams: usize = active
        .iter()
        .map(|&md| {
            let f = widths[md];
            if md.is_tokenized() {
                2 * f * d + config.n_layers * block + d
            } else {
                (f * d + d) + (d * d + d)
            }
        })
        .sum();
    let cross = if config.wiring.uses_cross_attention() {
        2 * block
    } else {
        0
    };
    let gate = if config.wiring.gates {
        m * m * d + m
    } else {
        0
    };
    let head =
        2 * m * d + (m * d * config.head_hidden + config.head_hidden) + (config.head_hidden + 1);
    streams + cross + gate + head
}

pub const CHECKPOINT_FORMAT: &str = "safn-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned parameter checkpoint: config header plus the flat parameter
/// vector in layout order. The fitted preprocessor travels along so the
/// checkpoint can score raw tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: SafnConfig,
    pub widths: BlockWidths,
    #[serde(default)]
    pub preprocessor: Option<FittedPreprocessor>,
    /// Subject ids held out when the checkpoint was selected.
    #[serde(default)]
    pub validation_subjects: Vec<String>,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn new(model: &Safn, params: Vec<f64>) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            widths: model.widths,
            preprocessor: None,
            validation_subjects: Vec::new(),
            params,
        }
    }

    /// Rebuild the network and check the parameter vector against it.
    pub fn model(&self) -> Result<Safn> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let model = Safn::new(self.config.clone(), self.widths)?;
        if model.param_count() != self.params.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} parameters, architecture needs {}",
                self.params.len(),
                model.param_count()
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        ckpt.model()?;
        Ok(ckpt)
    }
}
