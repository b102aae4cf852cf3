//! Binary classification metrics: confusion counts, thresholded scores,
//! ROC and precision-recall curves, the F1 threshold sweep and fold
//! aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::PerModality;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

fn check_inputs(probs: &[f64], labels: &[u8]) -> Result<()> {
    if probs.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if probs.is_empty() {
        return Err(Error::Degenerate("no samples to evaluate".into()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Degenerate(format!("label {y} is not binary")));
    }
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("scores".into()));
    }
    Ok(())
}

/// Counts with the rule "positive iff prob >= threshold".
pub fn confusion(probs: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionMatrix> {
    check_inputs(probs, labels)?;
    let mut cm = ConfusionMatrix::default();
    for (&p, &y) in probs.iter().zip(labels) {
        match (p >= threshold, y == 1) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, true) => cm.fn_ += 1,
            (false, false) => cm.tn += 1,
        }
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholded {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub f1: f64,
    pub balanced_accuracy: f64,
    /// Set when some ratio had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

pub fn thresholded_metrics(cm: &ConfusionMatrix) -> Thresholded {
    let mut degenerate = false;
    let mut ratio = |num: usize, den: usize| {
        if den == 0 {
            degenerate = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let accuracy = ratio(cm.tp + cm.tn, cm.total());
    let precision = ratio(cm.tp, cm.tp + cm.fp);
    let recall = ratio(cm.tp, cm.tp + cm.fn_);
    let specificity = ratio(cm.tn, cm.tn + cm.fp);
    let f1 = ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn_);
    Thresholded {
        accuracy,
        precision,
        recall,
        specificity,
        f1,
        balanced_accuracy: (recall + specificity) / 2.0,
        degenerate,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveData {
    /// `(fpr, tpr)` for ROC, `(recall, precision)` for PR.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// Groups of tied scores in descending score order, as `(positives, negatives)`.
fn tie_groups(probs: &[f64], labels: &[u8]) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut last = None;
    for i in order {
        if last != Some(probs[i]) {
            groups.push((0, 0));
            last = Some(probs[i]);
        }
        let g = groups.last_mut().expect("group pushed above");
        if labels[i] == 1 {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    groups
}

fn class_counts(labels: &[u8]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    (labels.len() - pos, pos)
}

/// ROC curve and the tie-corrected pair-counting AUC.
pub fn roc_auc(probs: &[f64], labels: &[u8]) -> Result<CurveData> {
    check_inputs(probs, labels)?;
    let (n_neg, n_pos) = class_counts(labels);
    if n_neg == 0 || n_pos == 0 {
        return Err(Error::Degenerate("ROC-AUC needs both classes".into()));
    }
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    // twice the pair statistic, kept integral
    let mut twice = 0u128;
    for (gp, gn) in tie_groups(probs, labels) {
        // negatives in this group sit below every positive seen so far
        twice += 2 * (tp as u128) * gn as u128 + (gp as u128) * gn as u128;
        tp += gp;
        fp += gn;
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    let auc = twice as f64 / (2.0 * n_pos as f64 * n_neg as f64);
    Ok(CurveData { points, auc })
}

/// Precision-recall curve with step-wise average precision as its area.
pub fn pr_auc(probs: &[f64], labels: &[u8]) -> Result<CurveData> {
    check_inputs(probs, labels)?;
    let (_, n_pos) = class_counts(labels);
    if n_pos == 0 {
        return Err(Error::Degenerate(
            "PR-AUC needs at least one positive".into(),
        ));
    }
    let mut points = vec![(0.0, 1.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut prev_recall = 0.0;
    for (gp, gn) in tie_groups(probs, labels) {
        tp += gp;
        fp += gn;
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        auc += (recall - prev_recall) * precision;
        prev_recall = recall;
        points.push((recall, precision));
    }
    Ok(CurveData { points, auc })
}

/// The sweep grid 0.05, 0.06, ..., 0.95.
pub fn threshold_grid() -> impl Iterator<Item = f64> {
    (5..=95).map(|i| i as f64 / 100.0)
}

/// Smallest grid threshold reaching the maximal F1, with that F1.
pub fn best_f1_threshold(probs: &[f64], labels: &[u8]) -> Result<(f64, f64)> {
    check_inputs(probs, labels)?;
    let mut best = (f64::NAN, f64::NEG_INFINITY);
    for t in threshold_grid() {
        let f1 = thresholded_metrics(&confusion(probs, labels, t)?).f1;
        if f1 > best.1 {
            best = (t, f1);
        }
    }
    Ok(best)
}

/// Right-continuous piecewise-linear evaluation of a curve at `x`.
fn interpolate(points: &[(f64, f64)], x: f64) -> f64 {
    let after = points.partition_point(|p| p.0 <= x);
    if after == 0 {
        return points[0].1;
    }
    let (x0, y0) = points[after - 1];
    match points.get(after) {
        Some(&(x1, y1)) if x1 > x0 => y0 + (y1 - y0) * (x - x0) / (x1 - x0),
        _ => y0,
    }
}

/// Average of curves resampled on a uniform grid over [0, 1]. The reported
/// area is the mean of the fold areas, not the area of the mean curve.
pub fn mean_curve(curves: &[CurveData], grid_size: usize) -> Result<CurveData> {
    if curves.is_empty() || curves.iter().any(|c| c.points.is_empty()) {
        return Err(Error::Degenerate("no curves to average".into()));
    }
    if grid_size < 2 {
        return Err(Error::Config("curve grid needs at least two points".into()));
    }
    let n = curves.len() as f64;
    let points = (0..grid_size)
        .map(|i| {
            let x = i as f64 / (grid_size - 1) as f64;
            let y = curves
                .iter()
                .map(|c| interpolate(&c.points, x))
                .sum::<f64>()
                / n;
            (x, y)
        })
        .collect();
    let auc = curves.iter().map(|c| c.auc).sum::<f64>() / n;
    Ok(CurveData { points, auc })
}

/// Everything reported for one validation fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub roc_auc: f64,
    pub pr_auc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: ConfusionMatrix,
    pub threshold: f64,
    pub best_f1_threshold: f64,
    pub best_f1: f64,
    pub roc_curve: CurveData,
    pub pr_curve: CurveData,
    /// Mean gate value per modality; `None` for modalities not in the model.
    pub gate_means: PerModality<Option<f64>>,
    pub degenerate: bool,
}

/// Column names of [`FoldReport::values`], in table order.
pub const METRIC_NAMES: [&str; 7] = [
    "accuracy",
    "balanced_accuracy",
    "roc_auc",
    "pr_auc",
    "precision",
    "recall",
    "f1",
];

impl FoldReport {
    pub fn evaluate(
        probs: &[f64],
        labels: &[u8],
        threshold: f64,
        gate_means: PerModality<Option<f64>>,
    ) -> Result<FoldReport> {
        let cm = confusion(probs, labels, threshold)?;
        let m = thresholded_metrics(&cm);
        let roc = roc_auc(probs, labels)?;
        let pr = pr_auc(probs, labels)?;
        let (best_t, best_f1) = best_f1_threshold(probs, labels)?;
        Ok(FoldReport {
            accuracy: m.accuracy,
            balanced_accuracy: m.balanced_accuracy,
            roc_auc: roc.auc,
            pr_auc: pr.auc,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            confusion: cm,
            threshold,
            best_f1_threshold: best_t,
            best_f1,
            roc_curve: roc,
            pr_curve: pr,
            gate_means,
            degenerate: m.degenerate,
        })
    }

    pub fn values(&self) -> [f64; 7] {
        [
            self.accuracy,
            self.balanced_accuracy,
            self.roc_auc,
            self.pr_auc,
            self.precision,
            self.recall,
            self.f1,
        ]
    }

    /// The early-stopping score: mean of AUROC, balanced accuracy and F1.
    pub fn composite(&self) -> f64 {
        (self.roc_auc + self.balanced_accuracy + self.f1) / 3.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub mean: f64,
    pub sd: f64,
}

/// Mean and sample standard deviation. A single value has SD 0.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Per-metric mean ± SD across folds, plus the composite.
pub fn aggregate(reports: &[FoldReport]) -> Vec<MetricSummary> {
    let mut out: Vec<MetricSummary> = METRIC_NAMES
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let vals: Vec<f64> = reports.iter().map(|r| r.values()[i]).collect();
            let (mean, sd) = mean_sd(&vals);
            MetricSummary {
                metric: name.to_string(),
                mean,
                sd,
            }
        })
        .collect();
    let (mean, sd) = mean_sd(
        &reports
            .iter()
            .map(FoldReport::composite)
            .collect::<Vec<_>>(),
    );
    out.push(MetricSummary {
        metric: "composite".into(),
        mean,
        sd,
    });
    out
}

/// Cell-wise mean confusion matrix as `[tp, tn, fp, fn]`.
pub fn mean_confusion(reports: &[FoldReport]) -> [f64; 4] {
    let n = reports.len().max(1) as f64;
    let mut acc = [0.0; 4];
    for r in reports {
        let c = r.confusion;
        for (a, v) in acc.iter_mut().zip([c.tp, c.tn, c.fp, c.fn_]) {
            *a += v as f64 / n;
        }
    }
    acc
}
