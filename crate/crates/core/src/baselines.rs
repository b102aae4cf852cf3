//! Reference models: L2-regularised logistic regression with balanced class
//! weights, and a plain multilayer perceptron over the concatenated features.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSchema, ModalityBundle, RawTable};
use crate::error::{Error, Result};
use crate::metrics::{self, CurveData, FoldReport, MetricSummary};
use crate::modality::PerModality;
use crate::model::ops::{dropout_mask, sigmoid};
use crate::rng;
use crate::training::{composite_metric, run_parallel, CvConfig, CvFolds, EpochRecord};

const LOGREG_TOLERANCE: f64 = 1e-6;
const LOGREG_MAX_ITER: usize = 5000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRegParams {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Inverse regularisation strength.
    pub c: f64,
    pub iterations: usize,
    pub grad_norm: f64,
}

impl LogRegParams {
    pub fn logit(&self, x: &[f64]) -> f64 {
        self.bias + x.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn predict(&self, x: &[Vec<f64>]) -> Vec<f64> {
        x.iter().map(|row| sigmoid(self.logit(row))).collect()
    }
}

/// Per-sample weights `n / (2 n_c)`, or all ones.
pub fn balanced_weights(y: &[u8], class_weighted: bool) -> Result<Vec<f64>> {
    let n1 = y.iter().filter(|&&v| v == 1).count();
    let n0 = y.len() - n1;
    if n0 == 0 || n1 == 0 {
        return Err(Error::Degenerate("both classes required".into()));
    }
    let n = y.len() as f64;
    let w = [n / (2.0 * n0 as f64), n / (2.0 * n1 as f64)];
    Ok(y.iter()
        .map(|&v| if class_weighted { w[v as usize] } else { 1.0 })
        .collect())
}

/// Softplus `ln(1 + e^s)` without overflow.
fn softplus(s: f64) -> f64 {
    if s > 0.0 {
        s + (-s).exp().ln_1p()
    } else {
        s.exp().ln_1p()
    }
}

/// Weighted mean cross-entropy plus `||w||^2 / (2 C n)`, with its gradient
/// over `[w..., b]`.
pub fn logreg_objective(
    params: &[f64],
    x: &[Vec<f64>],
    y: &[u8],
    sample_weights: &[f64],
    c: f64,
) -> (f64, Vec<f64>) {
    let d = params.len() - 1;
    let n = x.len() as f64;
    let (w, b) = (&params[..d], params[d]);
    let mut loss = 0.0;
    let mut grad = vec![0.0; d + 1];
    for ((row, &label), &sw) in x.iter().zip(y).zip(sample_weights) {
        let s = b + row.iter().zip(w).map(|(a, wi)| a * wi).sum::<f64>();
        // -[y ln p + (1-y) ln(1-p)] = softplus(s) - y s
        loss += sw * (softplus(s) - label as f64 * s);
        let r = sw * (sigmoid(s) - label as f64);
        for (g, a) in grad[..d].iter_mut().zip(row) {
            *g += r * a;
        }
        grad[d] += r;
    }
    let reg = 1.0 / (c * n);
    loss = loss / n + 0.5 * reg * w.iter().map(|v| v * v).sum::<f64>();
    for (g, wi) in grad[..d].iter_mut().zip(w) {
        *g = *g / n + reg * wi;
    }
    grad[d] /= n;
    (loss, grad)
}

fn logreg_hessian(params: &[f64], x: &[Vec<f64>], sample_weights: &[f64], c: f64) -> DMatrix<f64> {
    let d = params.len() - 1;
    let n = x.len() as f64;
    let mut h = DMatrix::zeros(d + 1, d + 1);
    let mut ext = DVector::zeros(d + 1);
    for (row, &sw) in x.iter().zip(sample_weights) {
        for (e, &a) in ext.iter_mut().zip(row) {
            *e = a;
        }
        ext[d] = 1.0;
        let s: f64 = params[d] + row.iter().zip(params).map(|(a, w)| a * w).sum::<f64>();
        let p = sigmoid(s);
        h.ger(sw * p * (1.0 - p) / n, &ext, &ext, 1.0);
    }
    for i in 0..d {
        h[(i, i)] += 1.0 / (c * n);
    }
    h
}

/// Fit by damped Newton iterations with Armijo backtracking, stopping when
/// the gradient norm falls below 1e-6. `init_seed` draws a random start in
/// [-1, 1]; `None` starts from zero.
pub fn train_logreg(
    x: &[Vec<f64>],
    y: &[u8],
    c: f64,
    class_weighted: bool,
    init_seed: Option<u64>,
) -> Result<LogRegParams> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Shape(format!(
            "{} rows for {} labels",
            x.len(),
            y.len()
        )));
    }
    if !(c > 0.0) {
        return Err(Error::Config(format!("C must be positive, got {c}")));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("ragged design matrix".into()));
    }
    let sw = balanced_weights(y, class_weighted)?;
    let mut params = match init_seed {
        Some(seed) => {
            let mut r = rng::stream(seed, &[0x106]);
            (0..=d).map(|_| r.random_range(-1.0..1.0)).collect()
        }
        None => vec![0.0; d + 1],
    };
    let (mut loss, mut grad) = logreg_objective(&params, x, y, &sw, c);
    for iteration in 0..LOGREG_MAX_ITER {
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if grad_norm < LOGREG_TOLERANCE {
            return Ok(LogRegParams {
                bias: params[d],
                weights: params[..d].to_vec(),
                c,
                iterations: iteration,
                grad_norm,
            });
        }
        let h = logreg_hessian(&params, x, &sw, c);
        let g = DVector::from_column_slice(&grad);
        let direction = match h.cholesky() {
            Some(ch) => -ch.solve(&g),
            None => -g.clone(),
        };
        let slope = direction.dot(&g);
        let mut t = 1.0;
        loop {
            let trial: Vec<f64> = params
                .iter()
                .zip(direction.iter())
                .map(|(p, dp)| p + t * dp)
                .collect();
            let (trial_loss, trial_grad) = logreg_objective(&trial, x, y, &sw, c);
            if trial_loss <= loss + 1e-4 * t * slope || t < 1e-12 {
                params = trial;
                loss = trial_loss;
                grad = trial_grad;
                break;
            }
            t *= 0.5;
        }
    }
    let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    Err(Error::NotConverged {
        iterations: LOGREG_MAX_ITER,
        grad_norm,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpBaselineConfig {
    pub hidden: Vec<usize>,
    pub dropout: f64,
    /// Weight positives by `n_neg / n_pos`.
    pub class_weighted: bool,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for MlpBaselineConfig {
    fn default() -> Self {
        MlpBaselineConfig {
            hidden: vec![128, 64],
            dropout: 0.4,
            class_weighted: true,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 64,
            epochs: 50,
            patience: 8,
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl MlpBaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.patience == 0 {
            return Err(Error::Config(
                "batch size, epochs and patience must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// ReLU network `input -> hidden... -> 1` over a flat parameter vector laid
/// out as `(W_l, b_l)` per layer, weights stored input-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    offsets: Vec<(usize, usize)>,
    len: usize,
}

/// Saved activations of one batch forward pass.
pub struct MlpCache {
    /// Layer inputs, post-activation and post-dropout.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
    masks: Vec<Option<Array2<f64>>>,
}

impl Mlp {
    pub fn new(input: usize, hidden: &[usize]) -> Mlp {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let mut offsets = Vec::new();
        let mut len = 0;
        for w in sizes.windows(2) {
            offsets.push((len, len + w[0] * w[1]));
            len += w[0] * w[1] + w[1];
        }
        Mlp {
            sizes,
            offsets,
            len,
        }
    }

    pub fn param_count(&self) -> usize {
        self.len
    }

    /// Uniform in `+-1/sqrt(fan_in)` for weights and biases.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut r = rng::stream(seed, &[0x3F]);
        let mut p = vec![0.0; self.len];
        for (l, w) in self.sizes.windows(2).enumerate() {
            let bound = 1.0 / (w[0] as f64).sqrt();
            let (start, bias) = self.offsets[l];
            for v in &mut p[start..bias + w[1]] {
                *v = r.random_range(-bound..bound);
            }
        }
        p
    }

    fn layer<'a>(&self, params: &'a [f64], l: usize) -> (ArrayView2<'a, f64>, &'a [f64]) {
        let (start, bias) = self.offsets[l];
        let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
        let w = ArrayView2::from_shape((fan_in, fan_out), &params[start..bias]).expect("layout");
        (w, &params[bias..bias + fan_out])
    }

    /// Logits for a batch. Dropout after each hidden ReLU when `rng` is given.
    pub fn forward(
        &self,
        params: &[f64],
        x: ArrayView2<f64>,
        dropout: f64,
        mut rng: Option<&mut rand_chacha::ChaCha8Rng>,
    ) -> (Array1<f64>, MlpCache) {
        let layers = self.sizes.len() - 1;
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(layers),
            pre: Vec::with_capacity(layers - 1),
            masks: Vec::with_capacity(layers - 1),
        };
        let mut h = x.to_owned();
        for l in 0..layers {
            let (w, b) = self.layer(params, l);
            let z = h.dot(&w) + &ndarray::aview1(b);
            cache.inputs.push(h);
            if l + 1 == layers {
                return (z.index_axis(Axis(1), 0).to_owned(), cache);
            }
            let mut a = z.mapv(|v| v.max(0.0));
            let mask = dropout_mask(a.dim(), dropout, rng.as_deref_mut());
            if let Some(m) = &mask {
                a *= m;
            }
            cache.pre.push(z);
            cache.masks.push(mask);
            h = a;
        }
        unreachable!("network has an output layer")
    }

    /// Accumulate parameter gradients given `d loss / d logit` per row.
    pub fn backward(&self, params: &[f64], cache: &MlpCache, dlogits: &[f64], grads: &mut [f64]) {
        let layers = self.sizes.len() - 1;
        let mut delta =
            Array2::from_shape_vec((dlogits.len(), 1), dlogits.to_vec()).expect("column");
        for l in (0..layers).rev() {
            let (start, bias) = self.offsets[l];
            let fan_out = self.sizes[l + 1];
            let dw = cache.inputs[l].t().dot(&delta);
            for (g, v) in grads[start..bias].iter_mut().zip(dw.iter()) {
                *g += v;
            }
            for (g, v) in grads[bias..bias + fan_out]
                .iter_mut()
                .zip(delta.sum_axis(Axis(0)).iter())
            {
                *g += v;
            }
            if l == 0 {
                break;
            }
            let (w, _) = self.layer(params, l);
            let mut dh = delta.dot(&w.t());
            if let Some(m) = &cache.masks[l - 1] {
                dh *= m;
            }
            dh.zip_mut_with(&cache.pre[l - 1], |d, &z| {
                if z <= 0.0 {
                    *d = 0.0;
                }
            });
            delta = dh;
        }
    }
}

/// Mean positive-weighted cross-entropy on logits and its logit gradient.
pub fn weighted_bce(logits: &[f64], y: &[u8], pos_weight: f64) -> (f64, Vec<f64>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&s, &label) in logits.iter().zip(y) {
        if label == 1 {
            loss += pos_weight * softplus(-s);
            grad.push(pos_weight * (sigmoid(s) - 1.0) / n);
        } else {
            loss += softplus(s);
            grad.push(sigmoid(s) / n);
        }
    }
    (loss / n, grad)
}

fn design_matrix(bundles: &[ModalityBundle]) -> Result<Array2<f64>> {
    let d = bundles.first().map_or(0, |b| b.widths().total());
    let mut x = Array2::zeros((bundles.len(), d));
    for (mut row, b) in x.rows_mut().into_iter().zip(bundles) {
        let v = b.concatenated();
        if v.len() != d {
            return Err(Error::Shape("samples have different feature widths".into()));
        }
        row.assign(&ndarray::aview1(&v));
    }
    Ok(x)
}

#[derive(Debug, Clone)]
pub struct MlpOutcome {
    pub params: Vec<f64>,
    pub best_epoch: usize,
    pub epochs: Vec<EpochRecord>,
    pub report: FoldReport,
}

/// Adam on positive-weighted cross-entropy with early stopping on the
/// validation composite metric.
pub fn train_mlp_baseline(
    train: &[ModalityBundle],
    val: &[ModalityBundle],
    config: &MlpBaselineConfig,
) -> Result<MlpOutcome> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Degenerate(
            "training and validation sets must be nonempty".into(),
        ));
    }
    let x = design_matrix(train)?;
    let xv = design_matrix(val)?;
    let y: Vec<u8> = train.iter().map(|b| b.label).collect();
    let yv: Vec<u8> = val.iter().map(|b| b.label).collect();
    let n1 = y.iter().filter(|&&v| v == 1).count();
    if n1 == 0 || n1 == y.len() {
        return Err(Error::Degenerate("both classes required".into()));
    }
    let pos_weight = if config.class_weighted {
        (y.len() - n1) as f64 / n1 as f64
    } else {
        1.0
    };

    let net = Mlp::new(x.ncols(), &config.hidden);
    let mut params = net.init_params(rng::derive_seed(config.seed, &[1]));
    let (mut m, mut v) = (vec![0.0; params.len()], vec![0.0; params.len()]);
    let mut order: Vec<usize> = (0..y.len()).collect();
    let mut shuffle = rng::stream(config.seed, &[2]);
    let mut step = 0i32;
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, Vec<f64>)> = None;
    let mut since_best = 0;

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for idx in order.chunks(config.batch_size) {
            let xb = x.select(Axis(0), idx);
            let yb: Vec<u8> = idx.iter().map(|&i| y[i]).collect();
            let mut drop_rng = rng::stream(config.seed, &[3, step as u64]);
            let (logits, cache) =
                net.forward(&params, xb.view(), config.dropout, Some(&mut drop_rng));
            let (loss, dlogits) =
                weighted_bce(logits.as_slice().expect("contiguous"), &yb, pos_weight);
            let mut grads = vec![0.0; params.len()];
            net.backward(&params, &cache, &dlogits, &mut grads);
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite("baseline gradients".into()));
            }
            step += 1;
            let c1 = 1.0 - config.beta1.powi(step);
            let c2 = 1.0 - config.beta2.powi(step);
            for i in 0..params.len() {
                m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * grads[i];
                v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * grads[i] * grads[i];
                params[i] -= config.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + config.adam_eps);
            }
            loss_sum += loss;
            batches += 1;
        }
        let probs: Vec<f64> = net
            .forward(&params, xv.view(), 0.0, None)
            .0
            .mapv(sigmoid)
            .to_vec();
        let c = composite_metric(&probs, &yv, config.threshold)?;
        if best.as_ref().is_none_or(|b| c.value > b.1) {
            best = Some((epoch, c.value, params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        let stopped = since_best >= config.patience;
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_composite: c.value,
            val_auroc: c.auroc.unwrap_or(f64::NAN),
            val_balacc: c.balanced_accuracy,
            val_f1: c.f1,
            lr: config.lr,
            stopped,
        });
        if stopped {
            break;
        }
    }
    let (best_epoch, _, params) = best.expect("at least one epoch runs");
    let probs: Vec<f64> = net
        .forward(&params, xv.view(), 0.0, None)
        .0
        .mapv(sigmoid)
        .to_vec();
    let report = FoldReport::evaluate(
        &probs,
        &yv,
        config.threshold,
        PerModality::from_fn(|_| None),
    )?;
    Ok(MlpOutcome {
        params,
        best_epoch,
        epochs,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaselineKind {
    LogisticRegression { c: f64, class_weighted: bool },
    Mlp(MlpBaselineConfig),
}

#[derive(Debug, Clone)]
pub struct BaselineCvResult {
    pub reports: Vec<FoldReport>,
    pub aggregate: Vec<MetricSummary>,
    pub mean_roc: CurveData,
    pub mean_pr: CurveData,
}

/// Cross-validate a baseline on the same folds and fold-local preprocessing
/// as the main model.
pub fn run_baseline_cv(
    table: &RawTable,
    schema: &DatasetSchema,
    kind: &BaselineKind,
    cv: &CvConfig,
) -> Result<BaselineCvResult> {
    let folds = CvFolds::prepare(table, schema, cv)?;
    let reports = run_parallel(cv, |fold| {
        let data = folds.fold(fold)?;
        match kind {
            BaselineKind::LogisticRegression { c, class_weighted } => {
                let x: Vec<Vec<f64>> = data
                    .train
                    .iter()
                    .map(ModalityBundle::concatenated)
                    .collect();
                let y: Vec<u8> = data.train.iter().map(|b| b.label).collect();
                let fit = train_logreg(&x, &y, *c, *class_weighted, None)?;
                let xv: Vec<Vec<f64>> = data.val.iter().map(ModalityBundle::concatenated).collect();
                let yv: Vec<u8> = data.val.iter().map(|b| b.label).collect();
                FoldReport::evaluate(&fit.predict(&xv), &yv, 0.5, PerModality::from_fn(|_| None))
            }
            BaselineKind::Mlp(config) => {
                let config = MlpBaselineConfig {
                    seed: rng::derive_seed(config.seed, &[fold as u64]),
                    ..config.clone()
                };
                Ok(train_mlp_baseline(&data.train, &data.val, &config)?.report)
            }
        }
    })?;
    let rocs: Vec<CurveData> = reports.iter().map(|r| r.roc_curve.clone()).collect();
    let prs: Vec<CurveData> = reports.iter().map(|r| r.pr_curve.clone()).collect();
    Ok(BaselineCvResult {
        aggregate: metrics::aggregate(&reports),
        mean_roc: metrics::mean_curve(&rocs, cv.curve_grid)?,
        mean_pr: metrics::mean_curve(&prs, cv.curve_grid)?,
        reports,
    })
}
