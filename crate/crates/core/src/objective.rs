//! Class-balanced focal loss with per-batch effective-number weights, the
//! l1 gate sparsity penalty, and their combination.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the per-class weights are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    /// `(1 - beta) / (1 - beta^n_c)` from the batch counts.
    EffectiveNumber,
    /// Both classes weighted 1.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub beta: f64,
    pub gamma: f64,
    pub lambda_s: f64,
    pub epsilon: f64,
    pub class_weighting: ClassWeighting,
    /// When false the sparsity term is dropped entirely (gate ablation).
    pub sparsity: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta: 0.999,
            gamma: 1.5,
            lambda_s: 1e-3,
            epsilon: 1e-7,
            class_weighting: ClassWeighting::EffectiveNumber,
            sparsity: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Config(format!("beta {} outside (0, 1)", self.beta)));
        }
        if self.gamma < 0.0 || self.lambda_s < 0.0 {
            return Err(Error::Config(
                "gamma and lambda_s must be non-negative".into(),
            ));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::Config(format!(
                "epsilon {} outside (0, 0.5)",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Effective-number class weights `(alpha_0, alpha_1)`, unnormalised.
/// A class absent from the batch gets weight 0.
pub fn effective_number_weights(n0: usize, n1: usize, beta: f64) -> (f64, f64) {
    let w = |n: usize| {
        if n == 0 {
            0.0
        } else {
            // (1 - beta) / (1 - beta^n), evaluated without cancellation
            let ln_beta = beta.ln();
            -(ln_beta.exp_m1()) / -((n as f64 * ln_beta).exp_m1())
        }
    };
    (w(n0), w(n1))
}

fn clamp(p: f64, eps: f64) -> f64 {
    p.clamp(eps, 1.0 - eps)
}

/// Per-sample class-balanced focal loss with `p` clamped to `[eps, 1 - eps]`.
pub fn cb_focal(p: f64, y: u8, weights: (f64, f64), gamma: f64, eps: f64) -> f64 {
    let p = clamp(p, eps);
    if y == 1 {
        -weights.1 * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -weights.0 * p.powf(gamma) * (1.0 - p).ln()
    }
}

/// `d cb_focal / dp`; zero where the clamp is active.
pub fn cb_focal_grad(p: f64, y: u8, weights: (f64, f64), gamma: f64, eps: f64) -> f64 {
    if p < eps || p > 1.0 - eps {
        return 0.0;
    }
    if y == 1 {
        let q = 1.0 - p;
        let focal_term = if gamma == 0.0 {
            0.0
        } else {
            gamma * q.powf(gamma - 1.0) * p.ln()
        };
        weights.1 * (focal_term - q.powf(gamma) / p)
    } else {
        let q = 1.0 - p;
        let focal_term = if gamma == 0.0 {
            0.0
        } else {
            gamma * p.powf(gamma - 1.0) * q.ln()
        };
        -weights.0 * (focal_term - p.powf(gamma) / q)
    }
}

/// Batch mean of `sum_j |alpha_j|`.
pub fn sparsity_penalty(gates: &[Vec<f64>]) -> f64 {
    if gates.is_empty() {
        return 0.0;
    }
    gates
        .iter()
        .map(|g| g.iter().map(|a| a.abs()).sum::<f64>())
        .sum::<f64>()
        / gates.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchLossBreakdown {
    pub focal_term: f64,
    /// Unscaled penalty; the total adds `lambda_s` times this.
    pub sparsity_term: f64,
    pub total: f64,
    pub class_weights_used: (f64, f64),
    pub batch_counts: (usize, usize),
}

/// Per-sample gradients of the batch objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    /// `d total / d logit_i`.
    pub logits: Vec<f64>,
    /// `d total / d alpha_ij`.
    pub gates: Vec<Vec<f64>>,
}

pub fn batch_weights(labels: &[u8], config: &LossConfig) -> ((f64, f64), (usize, usize)) {
    let n1 = labels.iter().filter(|&&y| y == 1).count();
    let n0 = labels.len() - n1;
    let w = match config.class_weighting {
        ClassWeighting::EffectiveNumber => effective_number_weights(n0, n1, config.beta),
        ClassWeighting::Uniform => (1.0, 1.0),
    };
    (w, (n0, n1))
}

/// One sample's contribution to a batch objective of `batch_len` samples.
/// Gradients already carry the batch mean's `1 / batch_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTerms {
    pub focal: f64,
    /// `sum_j |alpha_j|`, unscaled.
    pub sparsity: f64,
    pub dlogit: f64,
    pub dgates: Vec<f64>,
}

/// Pass an empty `gates` slice when the sparsity term is off.
pub fn sample_terms(
    logit: f64,
    label: u8,
    gates: &[f64],
    weights: (f64, f64),
    batch_len: usize,
    config: &LossConfig,
) -> SampleTerms {
    let n = batch_len as f64;
    let p = crate::model::ops::sigmoid(logit);
    let focal = cb_focal(p, label, weights, config.gamma, config.epsilon);
    let dp = cb_focal_grad(p, label, weights, config.gamma, config.epsilon);
    let (sparsity, dgates) = if config.sparsity {
        (
            gates.iter().map(|a| a.abs()).sum(),
            gates
                .iter()
                .map(|a| config.lambda_s * a.signum() / n)
                .collect(),
        )
    } else {
        (0.0, Vec::new())
    };
    SampleTerms {
        focal,
        sparsity,
        dlogit: dp * p * (1.0 - p) / n,
        dgates,
    }
}

/// Mean focal loss with batch-level weights plus `lambda_s` times the mean
/// gate penalty, along with gradients on logits and gates.
pub fn total_loss(
    logits: &[f64],
    labels: &[u8],
    gates: &[Vec<f64>],
    config: &LossConfig,
) -> Result<(BatchLossBreakdown, LossGradients)> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logits for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let use_gates = config.sparsity && !gates.is_empty();
    if use_gates && gates.len() != logits.len() {
        return Err(Error::Shape("one gate vector per sample required".into()));
    }
    let n = logits.len();
    let (weights, counts) = batch_weights(labels, config);
    let (mut focal, mut sparsity) = (0.0, 0.0);
    let mut dlogits = Vec::with_capacity(n);
    let mut dgates = Vec::with_capacity(n);
    for (i, (&s, &y)) in logits.iter().zip(labels).enumerate() {
        let g = if use_gates { gates[i].as_slice() } else { &[] };
        let t = sample_terms(s, y, g, weights, n, config);
        focal += t.focal;
        sparsity += t.sparsity;
        dlogits.push(t.dlogit);
        dgates.push(t.dgates);
    }
    focal /= n as f64;
    sparsity /= n as f64;
    let breakdown = BatchLossBreakdown {
        focal_term: focal,
        sparsity_term: sparsity,
        total: focal + config.lambda_s * sparsity,
        class_weights_used: weights,
        batch_counts: counts,
    };
    Ok((
        breakdown,
        LossGradients {
            logits: dlogits,
            gates: dgates,
        },
    ))
}
