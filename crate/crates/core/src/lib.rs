//! Sparse attention-gated fusion network (SAFN) for binary classification
//! over four tabular modalities, with its class-balanced focal objective,
//! cross-validated training protocol, evaluation metrics, attribution tools,
//! group statistics and reference baselines.
//!
//! The crate is organised bottom-up:
//!
//! - [`data`]: CSV loading, leakage-safe preprocessing, fold planning and a
//!   synthetic cohort generator.
//! - [`model`]: the network itself with hand-written backpropagation.
//! - [`objective`]: class-balanced focal loss plus the gate sparsity penalty.
//! - [`metrics`]: thresholded metrics, ROC/PR curves and fold averaging.
//! - [`training`]: AdamW, warmup-cosine schedule, EMA, early stopping, the
//!   cross-validation driver and ablations.
//! - [`interpretability`]: gradient-times-input attribution and gate reports.
//! - [`stats`]: nonparametric group comparisons with FDR control.
//! - [`baselines`]: logistic regression and the concatenation MLP.

pub mod baselines;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod interpretability;
pub mod metrics;
pub mod modality;
pub mod model;
pub mod objective;
pub mod rng;
pub mod stats;
pub mod training;

pub use error::{Error, ErrorKind, Result};
pub use modality::{BlockWidths, Modality, PerModality};
