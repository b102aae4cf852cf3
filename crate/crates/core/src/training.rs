//! Optimisation stack (AdamW, warmup-cosine schedule, EMA, clipping), the
//! per-fold training loop with early stopping, cross-validation and the
//! ablation harness.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    drop_high_missingness, make_folds, DatasetSchema, FittedPreprocessor, FoldPlan, ModalityBundle,
    RawTable,
};
use crate::error::{Error, Result};
use crate::metrics::{self, mean_confusion, CurveData, FoldReport, MetricSummary};
use crate::modality::{Modality, PerModality};
use crate::model::{Checkpoint, OutputGrad, Safn, SafnConfig};
use crate::objective::{batch_weights, sample_terms, ClassWeighting, LossConfig};
use crate::rng;

const TAG_INIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_DROPOUT: u64 = 3;
const TAG_FOLD: u64 = 4;

/// Samples per gradient work unit. Fixed so the summation order, and hence
/// every result, is independent of the thread count.
const CHUNK: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub ema_decay: f64,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 2e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            ema_decay: 0.999,
            epochs: 60,
            patience: 12,
            batch_size: 64,
            warmup_fraction: 0.10,
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("adam_eps", self.adam_eps),
            ("clip_norm", self.clip_norm),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        for (name, v) in [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("ema_decay", self.ema_decay),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} outside [0, 1]")));
            }
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config(format!(
                "warmup_fraction {} outside (0, 1)",
                self.warmup_fraction
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if self.patience == 0 || self.patience > self.epochs {
            return Err(Error::Config(format!(
                "patience {} must be in 1..={}",
                self.patience, self.epochs
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold {} outside (0, 1)",
                self.threshold
            )));
        }
        Ok(())
    }

    /// Scheduled optimiser steps for a training set of `n` samples.
    pub fn total_steps(&self, n: usize) -> usize {
        self.epochs * n.div_ceil(self.batch_size)
    }
}

/// Adam moments, step counter and the EMA shadow of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub ema: Vec<f64>,
}

impl OptimState {
    pub fn new(params: &[f64]) -> Self {
        OptimState {
            m: vec![0.0; params.len()],
            v: vec![0.0; params.len()],
            step: 0,
            ema: params.to_vec(),
        }
    }
}

/// Decoupled weight decay followed by a bias-corrected Adam update.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimState,
    lr_t: f64,
    config: &OptimConfig,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Shape(
            "optimizer buffers do not match parameters".into(),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for i in 0..n {
        let g = grads[i];
        params[i] -= lr_t * config.weight_decay * params[i];
        state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
        state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr_t * m_hat / (v_hat.sqrt() + config.adam_eps);
    }
    Ok(())
}

/// Rescale to global l2 norm `clip_norm` when above it. Returns the norm
/// before clipping.
pub fn clip_gradients(grads: &mut [f64], clip_norm: f64) -> Result<f64> {
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradients".into()));
    }
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > clip_norm {
        let scale = clip_norm / norm;
        grads.iter_mut().for_each(|g| *g *= scale);
    }
    Ok(norm)
}

/// Linear warmup to `lr` over the first `ceil(warmup_fraction * total)`
/// steps (first step at `lr / warmup`), then cosine decay to 0 at the last
/// step.
pub fn lr_at(step: usize, total_steps: usize, config: &OptimConfig) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::Config(format!(
            "step {step} outside schedule of {total_steps} steps"
        )));
    }
    let warmup = warmup_steps(total_steps, config);
    if step < warmup {
        return Ok(config.lr * ((step + 1) as f64 / warmup as f64));
    }
    if total_steps == warmup {
        return Ok(config.lr);
    }
    let progress = (step + 1 - warmup) as f64 / (total_steps - warmup) as f64;
    Ok(config.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

pub fn warmup_steps(total_steps: usize, config: &OptimConfig) -> usize {
    ((config.warmup_fraction * total_steps as f64).ceil() as usize).clamp(1, total_steps.max(1))
}

pub fn ema_update(shadow: &mut [f64], params: &[f64], decay: f64) {
    for (s, &p) in shadow.iter_mut().zip(params) {
        *s = decay * *s + (1.0 - decay) * p;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Composite {
    pub value: f64,
    pub auroc: Option<f64>,
    pub balanced_accuracy: f64,
    pub f1: f64,
    /// Only one class present: AUROC undefined, value averages the other two.
    pub single_class: bool,
}

/// Mean of ROC-AUC, balanced accuracy and F1 at `threshold`.
pub fn composite_metric(probs: &[f64], labels: &[u8], threshold: f64) -> Result<Composite> {
    let m = metrics::thresholded_metrics(&metrics::confusion(probs, labels, threshold)?);
    let single_class = !(labels.contains(&0) && labels.contains(&1));
    let auroc = if single_class {
        None
    } else {
        Some(metrics::roc_auc(probs, labels)?.auc)
    };
    let value = match auroc {
        Some(a) => (a + m.balanced_accuracy + m.f1) / 3.0,
        None => (m.balanced_accuracy + m.f1) / 2.0,
    };
    Ok(Composite {
        value,
        auroc,
        balanced_accuracy: m.balanced_accuracy,
        f1: m.f1,
        single_class,
    })
}

/// Evaluation-mode outputs for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub prob: f64,
    /// Gates of the active modalities, in fusion order.
    pub gates: Vec<f64>,
}

pub fn predict(
    model: &Safn,
    params: &[f64],
    bundles: &[ModalityBundle],
) -> Result<Vec<Prediction>> {
    bundles
        .par_iter()
        .map(|b| {
            let t = model.forward(b, params, false, 0)?;
            Ok(Prediction {
                prob: t.prob,
                gates: t.alpha,
            })
        })
        .collect()
}

/// Mean gate per modality over a set of predictions.
pub fn gate_means(model: &Safn, predictions: &[Prediction]) -> PerModality<Option<f64>> {
    let active = model.config.wiring.active_modalities();
    let n = predictions.len() as f64;
    PerModality::from_fn(|m| {
        let j = active.iter().position(|&a| a == m)?;
        if predictions.is_empty() {
            return None;
        }
        Some(predictions.iter().map(|p| p.gates[j]).sum::<f64>() / n)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub focal: f64,
    /// Unscaled mean gate l1 norm; 0 when the sparsity term is off.
    pub sparsity: f64,
    pub total: f64,
    pub alpha0: f64,
    pub alpha1: f64,
    pub n0: usize,
    pub n1: usize,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_composite: f64,
    pub val_auroc: f64,
    pub val_balacc: f64,
    pub val_f1: f64,
    pub lr: f64,
    pub stopped: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// EMA parameters of the best epoch.
    pub params: Vec<f64>,
    pub best_epoch: usize,
    pub best_composite: f64,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub report: FoldReport,
    pub val_predictions: Vec<Prediction>,
}

struct ChunkResult {
    grads: Vec<f64>,
    focal: f64,
    sparsity: f64,
}

/// Loss and accumulated gradient over one mini-batch in train mode.
fn batch_gradient(
    model: &Safn,
    params: &[f64],
    batch: &[&ModalityBundle],
    loss: &LossConfig,
    seeds: &[u64],
) -> Result<(Vec<f64>, f64, f64, (f64, f64), (usize, usize))> {
    let labels: Vec<u8> = batch.iter().map(|b| b.label).collect();
    let (weights, counts) = batch_weights(&labels, loss);
    let use_gates = loss.sparsity && model.config.wiring.gates;
    let n = batch.len();
    let chunks: Vec<ChunkResult> = batch
        .par_chunks(CHUNK)
        .zip(seeds.par_chunks(CHUNK))
        .map(|(samples, seeds)| {
            let mut out = ChunkResult {
                grads: vec![0.0; params.len()],
                focal: 0.0,
                sparsity: 0.0,
            };
            for (b, &seed) in samples.iter().zip(seeds) {
                let trace = model.forward(b, params, true, seed)?;
                let gates: &[f64] = if use_gates { &trace.alpha } else { &[] };
                let t = sample_terms(trace.logit, b.label, gates, weights, n, loss);
                out.focal += t.focal;
                out.sparsity += t.sparsity;
                let og = OutputGrad {
                    logit: t.dlogit,
                    gates: t.dgates,
                };
                model.backward(&trace, params, &og, &mut out.grads)?;
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut grads = vec![0.0; params.len()];
    let (mut focal, mut sparsity) = (0.0, 0.0);
    for c in chunks {
        for (g, v) in grads.iter_mut().zip(&c.grads) {
            *g += v;
        }
        focal += c.focal;
        sparsity += c.sparsity;
    }
    Ok((
        grads,
        focal / n as f64,
        sparsity / n as f64,
        weights,
        counts,
    ))
}

/// Train from a fresh initialisation and return the best EMA checkpoint.
///
/// Seeds for initialisation, shuffling and dropout all derive from
/// `optim.seed`.
pub fn train_one_fold(
    model: &Safn,
    train: &[ModalityBundle],
    val: &[ModalityBundle],
    loss: &LossConfig,
    optim: &OptimConfig,
) -> Result<TrainOutcome> {
    optim.validate()?;
    loss.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Degenerate(
            "training and validation sets must be nonempty".into(),
        ));
    }
    let init_seed = rng::derive_seed(optim.seed, &[TAG_INIT]);
    let mut params = model.init_params(init_seed);
    let mut state = OptimState::new(&params);
    let total_steps = optim.total_steps(train.len());
    let val_labels: Vec<u8> = val.iter().map(|b| b.label).collect();

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = rng::stream(optim.seed, &[TAG_SHUFFLE]);
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, Vec<f64>)> = None;
    let mut since_best = 0;
    let mut step = 0usize;

    for epoch in 0..optim.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        let mut lr = 0.0;
        for idx in order.chunks(optim.batch_size) {
            let batch: Vec<&ModalityBundle> = idx.iter().map(|&i| &train[i]).collect();
            let seeds: Vec<u64> = (0..batch.len())
                .map(|i| rng::derive_seed(optim.seed, &[TAG_DROPOUT, step as u64, i as u64]))
                .collect();
            let (mut grads, focal, sparsity, weights, counts) =
                batch_gradient(model, &params, &batch, loss, &seeds)?;
            let grad_norm = clip_gradients(&mut grads, optim.clip_norm)?;
            lr = lr_at(step, total_steps, optim)?;
            adamw_step(&mut params, &grads, &mut state, lr, optim)?;
            ema_update(&mut state.ema, &params, optim.ema_decay);
            let total = focal + loss.lambda_s * sparsity;
            steps.push(StepRecord {
                epoch,
                step,
                lr,
                focal,
                sparsity,
                total,
                alpha0: weights.0,
                alpha1: weights.1,
                n0: counts.0,
                n1: counts.1,
                grad_norm,
            });
            loss_sum += total;
            batches += 1;
            step += 1;
        }

        let preds = predict(model, &state.ema, val)?;
        let probs: Vec<f64> = preds.iter().map(|p| p.prob).collect();
        let c = composite_metric(&probs, &val_labels, optim.threshold)?;
        let improved = best.as_ref().is_none_or(|b| c.value > b.1);
        if improved {
            best = Some((epoch, c.value, state.ema.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        let stopped = since_best >= optim.patience;
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_composite: c.value,
            val_auroc: c.auroc.unwrap_or(f64::NAN),
            val_balacc: c.balanced_accuracy,
            val_f1: c.f1,
            lr,
            stopped,
        });
        if stopped {
            break;
        }
    }

    let (best_epoch, best_composite, params) = best.expect("at least one epoch runs");
    let val_predictions = predict(model, &params, val)?;
    let probs: Vec<f64> = val_predictions.iter().map(|p| p.prob).collect();
    let report = FoldReport::evaluate(
        &probs,
        &val_labels,
        optim.threshold,
        gate_means(model, &val_predictions),
    )?;
    Ok(TrainOutcome {
        params,
        best_epoch,
        best_composite,
        epochs,
        steps,
        report,
        val_predictions,
    })
}

/// Which parts of the model or objective to switch off.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationSpec {
    pub modalities: Vec<Modality>,
    pub disable_cross_attention: bool,
    pub disable_gates: bool,
    pub disable_class_weighting: bool,
    /// With class weighting off, keep the focal exponent instead of falling
    /// back to plain cross-entropy.
    pub keep_focal_gamma: bool,
}

impl Default for AblationSpec {
    fn default() -> Self {
        AblationSpec {
            modalities: Modality::ALL.to_vec(),
            disable_cross_attention: false,
            disable_gates: false,
            disable_class_weighting: false,
            keep_focal_gamma: false,
        }
    }
}

impl AblationSpec {
    pub fn only(m: Modality) -> Self {
        AblationSpec {
            modalities: vec![m],
            ..Default::default()
        }
    }

    pub fn without(m: Modality) -> Self {
        AblationSpec {
            modalities: Modality::ALL.into_iter().filter(|&x| x != m).collect(),
            ..Default::default()
        }
    }

    /// The named SAFN variants of the standard ablation table.
    pub fn standard_grid() -> Vec<(String, AblationSpec)> {
        vec![
            ("Clinical-only SAFN".into(), Self::only(Modality::Clinical)),
            (
                "MRI Cortical Thickness-only SAFN".into(),
                Self::only(Modality::MriCt),
            ),
            (
                "SAFN w/o Clinical".into(),
                Self::without(Modality::Clinical),
            ),
            (
                "SAFN w/o MRI Cortical Thickness".into(),
                Self::without(Modality::MriCt),
            ),
            (
                "SAFN w/o cross-attention".into(),
                AblationSpec {
                    disable_cross_attention: true,
                    ..Default::default()
                },
            ),
            (
                "SAFN w/o gates".into(),
                AblationSpec {
                    disable_gates: true,
                    ..Default::default()
                },
            ),
            (
                "SAFN (no class-weighting)".into(),
                AblationSpec {
                    disable_class_weighting: true,
                    ..Default::default()
                },
            ),
        ]
    }
}

/// Rewire model and objective according to `spec`.
pub fn apply_ablation(
    spec: &AblationSpec,
    model: &SafnConfig,
    loss: &LossConfig,
) -> Result<(SafnConfig, LossConfig)> {
    if spec.modalities.is_empty() {
        return Err(Error::Config(
            "ablation must keep at least one modality".into(),
        ));
    }
    let mut model = model.clone();
    let mut loss = loss.clone();
    model.wiring.modalities = PerModality::from_fn(|m| spec.modalities.contains(&m));
    if spec.disable_cross_attention {
        model.wiring.cross_attention = false;
    }
    if spec.disable_gates {
        model.wiring.gates = false;
        loss.sparsity = false;
    }
    if spec.disable_class_weighting {
        loss.class_weighting = ClassWeighting::Uniform;
        if !spec.keep_focal_gamma {
            loss.gamma = 0.0;
        }
    }
    Ok((model, loss))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvConfig {
    pub k: usize,
    pub fold_seed: u64,
    /// Columns missing in more than this fraction of rows are dropped.
    pub missingness_threshold: f64,
    pub curve_grid: usize,
    /// Worker threads for fold-level parallelism; 0 uses all cores.
    pub jobs: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            k: 5,
            fold_seed: 0,
            missingness_threshold: 0.20,
            curve_grid: 101,
            jobs: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub fold: usize,
    pub validation_rows: Vec<usize>,
    pub checkpoint: Checkpoint,
    pub outcome: TrainOutcome,
}

#[derive(Debug, Clone)]
pub struct CvResult {
    pub plan: FoldPlan,
    pub dropped_columns: Vec<String>,
    pub folds: Vec<FoldOutcome>,
    pub aggregate: Vec<MetricSummary>,
    pub mean_roc: CurveData,
    pub mean_pr: CurveData,
    /// `[tp, tn, fp, fn]` averaged over folds.
    pub mean_confusion: [f64; 4],
}

impl CvResult {
    pub fn reports(&self) -> Vec<FoldReport> {
        self.folds
            .iter()
            .map(|f| f.outcome.report.clone())
            .collect()
    }

    pub fn mean_composite(&self) -> f64 {
        self.aggregate
            .iter()
            .find(|s| s.metric == "composite")
            .map_or(f64::NAN, |s| s.mean)
    }
}

/// A table split into folds after dropping high-missingness columns.
#[derive(Debug, Clone)]
pub struct CvFolds {
    pub table: RawTable,
    pub schema: DatasetSchema,
    pub dropped: Vec<String>,
    pub plan: FoldPlan,
}

/// One fold's preprocessor, fitted on its training rows only, and the
/// encoded training and validation sets.
#[derive(Debug, Clone)]
pub struct FoldData {
    pub preprocessor: FittedPreprocessor,
    pub train: Vec<ModalityBundle>,
    pub val: Vec<ModalityBundle>,
    pub validation_rows: Vec<usize>,
    pub validation_subjects: Vec<String>,
}

impl CvFolds {
    pub fn prepare(table: &RawTable, schema: &DatasetSchema, cv: &CvConfig) -> Result<CvFolds> {
        let (table, dropped) = drop_high_missingness(table, cv.missingness_threshold);
        let schema = schema.without_columns(&dropped);
        let plan = make_folds(&table.labels(), &table.subject_ids(), cv.k, cv.fold_seed)?;
        Ok(CvFolds {
            table,
            schema,
            dropped,
            plan,
        })
    }

    pub fn fold(&self, fold: usize) -> Result<FoldData> {
        let validation_rows = self.plan.validation_rows(fold);
        let train_table = self.table.select(&self.plan.training_rows(fold));
        let val_table = self.table.select(&validation_rows);
        let preprocessor = FittedPreprocessor::fit(&train_table, &self.schema)?;
        Ok(FoldData {
            train: preprocessor.apply(&train_table)?,
            val: preprocessor.apply(&val_table)?,
            validation_subjects: val_table
                .subject_ids()
                .into_iter()
                .map(String::from)
                .collect(),
            validation_rows,
            preprocessor,
        })
    }
}

/// Run `f` for every fold on a pool of `cv.jobs` threads, in fold order.
pub fn run_parallel<T: Send>(
    cv: &CvConfig,
    f: impl Fn(usize) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cv.jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| (0..cv.k).into_par_iter().map(f).collect())
}

/// Grouped stratified k-fold cross-validation with fold-local
/// preprocessing. Folds run in parallel; results do not depend on the
/// number of worker threads.
pub fn run_cv(
    table: &RawTable,
    schema: &DatasetSchema,
    model: &SafnConfig,
    loss: &LossConfig,
    optim: &OptimConfig,
    ablation: Option<&AblationSpec>,
    cv: &CvConfig,
) -> Result<CvResult> {
    let (model_cfg, loss_cfg) = match ablation {
        Some(spec) => apply_ablation(spec, model, loss)?,
        None => (model.clone(), loss.clone()),
    };
    let folds_in = CvFolds::prepare(table, schema, cv)?;
    let run_fold = |fold: usize| -> Result<FoldOutcome> {
        let data = folds_in.fold(fold)?;
        let net = Safn::new(model_cfg.clone(), data.preprocessor.widths())?;
        let fold_optim = OptimConfig {
            seed: rng::derive_seed(optim.seed, &[TAG_FOLD, fold as u64]),
            ..optim.clone()
        };
        let outcome = train_one_fold(&net, &data.train, &data.val, &loss_cfg, &fold_optim)?;
        let mut checkpoint = Checkpoint::new(&net, outcome.params.clone());
        checkpoint.validation_subjects = data.validation_subjects;
        checkpoint.preprocessor = Some(data.preprocessor);
        Ok(FoldOutcome {
            fold,
            validation_rows: data.validation_rows,
            checkpoint,
            outcome,
        })
    };

    let folds: Vec<FoldOutcome> = run_parallel(cv, run_fold)?;

    let reports: Vec<FoldReport> = folds.iter().map(|f| f.outcome.report.clone()).collect();
    let rocs: Vec<CurveData> = reports.iter().map(|r| r.roc_curve.clone()).collect();
    let prs: Vec<CurveData> = reports.iter().map(|r| r.pr_curve.clone()).collect();
    Ok(CvResult {
        plan: folds_in.plan,
        dropped_columns: folds_in.dropped,
        aggregate: metrics::aggregate(&reports),
        mean_roc: metrics::mean_curve(&rocs, cv.curve_grid)?,
        mean_pr: metrics::mean_curve(&prs, cv.curve_grid)?,
        mean_confusion: mean_confusion(&reports),
        folds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_examples() {
        let cfg = OptimConfig::default();
        let mut p = vec![1.0];
        let mut s = OptimState::new(&p);
        adamw_step(&mut p, &[0.0], &mut s, 2e-4, &cfg).unwrap();
        assert!((p[0] - (1.0 - 2e-8)).abs() < 1e-18);
        assert_eq!(s.step, 1);

        // first step: m_hat = g, v_hat = g^2, update = -lr g / (|g| + eps)
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        for g in [0.3, -2.0] {
            let mut p = vec![0.0];
            let mut s = OptimState::new(&p);
            adamw_step(&mut p, &[g], &mut s, 1e-3, &cfg).unwrap();
            let expected = -1e-3 * g / (g.abs() + cfg.adam_eps);
            assert!((p[0] - expected).abs() < 1e-18);
            assert!((p[0] + 1e-3 * g.signum()).abs() < 1e-10);
        }

        let mut p = vec![0.5, -1.0];
        let mut s = OptimState::new(&p);
        adamw_step(&mut p, &[0.1, 0.2], &mut s, 0.0, &cfg).unwrap();
        assert_eq!(p, vec![0.5, -1.0]);
        assert!(adamw_step(&mut p, &[0.1], &mut s, 0.1, &cfg).is_err());
    }

    #[test]
    fn clip_examples() {
        let mut g = vec![0.3, 0.4];
        clip_gradients(&mut g, 1.0).unwrap();
        assert_eq!(g, vec![0.3, 0.4]);
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_gradients(&mut g, 1.0).unwrap(), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        assert!(clip_gradients(&mut [f64::NAN], 1.0).is_err());
    }

    #[test]
    fn schedule_boundaries() {
        let cfg = OptimConfig::default();
        let total = 100;
        let w = warmup_steps(total, &cfg);
        assert_eq!(w, 10);
        assert!((lr_at(0, total, &cfg).unwrap() - cfg.lr / 10.0).abs() < 1e-20);
        assert_eq!(lr_at(w - 1, total, &cfg).unwrap(), cfg.lr);
        assert!(lr_at(total - 1, total, &cfg).unwrap().abs() < 1e-12);
        // midpoint of the 90 decay steps
        assert!((lr_at(w - 1 + 45, total, &cfg).unwrap() - cfg.lr / 2.0).abs() < 1e-15);
        assert!(lr_at(total, total, &cfg).is_err());
    }

    #[test]
    fn ema_examples() {
        let mut s = vec![0.3];
        ema_update(&mut s, &[5.0], 1.0);
        assert_eq!(s, vec![0.3]);
        let mut s = vec![0.0];
        ema_update(&mut s, &[1.0], 0.999);
        assert!((s[0] - 0.001).abs() < 1e-15);
        // constant target: gap shrinks by decay^k
        let mut s = vec![0.0];
        for _ in 0..50 {
            ema_update(&mut s, &[1.0], 0.9);
        }
        assert!((1.0 - s[0] - 0.9f64.powi(50)).abs() < 1e-12);
    }

    #[test]
    fn composite_examples() {
        let c = composite_metric(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0], 0.5).unwrap();
        assert_eq!(c.value, 1.0);
        let c = composite_metric(&[0.5; 4], &[1, 0, 1, 0], 0.5).unwrap();
        assert!((c.value - (0.5 + 0.5 + 2.0 / 3.0) / 3.0).abs() < 1e-15);
        let c = composite_metric(&[0.7, 0.2], &[1, 1], 0.5).unwrap();
        assert!(c.single_class && c.auroc.is_none());
        assert_eq!(c.value, (0.25 + 2.0 / 3.0) / 2.0);
    }

    #[test]
    fn ablation_wiring() {
        let base = SafnConfig::default();
        let loss = LossConfig::default();
        let (m, l) = apply_ablation(&AblationSpec::only(Modality::Clinical), &base, &loss).unwrap();
        assert_eq!(m.wiring.active_modalities(), vec![Modality::Clinical]);
        assert_eq!(l, loss);
        let spec = AblationSpec {
            disable_gates: true,
            ..Default::default()
        };
        let (m, l) = apply_ablation(&spec, &base, &loss).unwrap();
        assert!(!m.wiring.gates && !l.sparsity);
        let spec = AblationSpec {
            disable_class_weighting: true,
            ..Default::default()
        };
        let (_, l) = apply_ablation(&spec, &base, &loss).unwrap();
        assert_eq!((l.class_weighting, l.gamma), (ClassWeighting::Uniform, 0.0));
        let spec = AblationSpec {
            modalities: vec![],
            ..Default::default()
        };
        assert!(apply_ablation(&spec, &base, &loss).is_err());
        assert_eq!(AblationSpec::standard_grid().len(), 7);
    }
}
