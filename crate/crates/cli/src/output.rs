//! CSV layouts for every artifact the commands write.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use safn_core::interpretability::{AttributionReport, GateReport};
use safn_core::metrics::{CurveData, FoldReport, MetricSummary, METRIC_NAMES};
use safn_core::stats::TestResult;

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

fn num(v: f64) -> String {
    format!("{v}")
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = writer(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

const FOLD_EXTRA: [&str; 8] = [
    "composite",
    "threshold",
    "best_f1_threshold",
    "best_f1",
    "tp",
    "tn",
    "fp",
    "fn",
];

fn fold_values(r: &FoldReport) -> Vec<f64> {
    let c = &r.confusion;
    let mut v = r.values().to_vec();
    v.extend([
        r.composite(),
        r.threshold,
        r.best_f1_threshold,
        r.best_f1,
        c.tp as f64,
        c.tn as f64,
        c.fp as f64,
        c.fn_ as f64,
    ]);
    v
}

/// One row per fold then a `mean` row holding the column means.
pub fn write_metrics(path: &Path, reports: &[FoldReport]) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["fold"];
    header.extend(METRIC_NAMES);
    header.extend(FOLD_EXTRA);
    w.write_record(&header)?;
    let rows: Vec<Vec<f64>> = reports.iter().map(fold_values).collect();
    for (i, row) in rows.iter().enumerate() {
        w.write_record(std::iter::once((i + 1).to_string()).chain(row.iter().map(|&v| num(v))))?;
    }
    let n = rows.len().max(1) as f64;
    let means = (0..header.len() - 1).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n);
    w.write_record(std::iter::once("mean".to_string()).chain(means.map(num)))?;
    w.flush()?;
    Ok(())
}

pub fn format_mean_sd(s: &MetricSummary) -> String {
    format!("{:.2} ± {:.2}", s.mean, s.sd)
}

pub fn write_summary(path: &Path, summary: &[MetricSummary]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["metric", "mean", "sd", "formatted"])?;
    for s in summary {
        w.write_record([s.metric.clone(), num(s.mean), num(s.sd), format_mean_sd(s)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_curve(path: &Path, curve: &CurveData, x: &str, y: &str) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([x, y])?;
    for &(a, b) in &curve.points {
        w.write_record([num(a), num(b)])?;
    }
    w.flush()?;
    Ok(())
}

/// `[tp, tn, fp, fn]` as a 2x2 table with actual classes as rows.
pub fn write_confusion(path: &Path, m: [f64; 4]) -> Result<()> {
    let [tp, tn, fp, fn_] = m;
    let mut w = writer(path)?;
    w.write_record(["actual", "predicted_negative", "predicted_positive"])?;
    w.write_record(["negative".into(), num(tn), num(fp)])?;
    w.write_record(["positive".into(), num(fn_), num(tp)])?;
    w.flush()?;
    Ok(())
}

pub fn write_gate_report(path: &Path, report: &GateReport) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "modality",
        "mean_gate_weight",
        "normalized_contribution_percent",
    ])?;
    for g in &report.gates {
        w.write_record([
            g.modality.label().to_string(),
            num(g.raw_mean),
            num(100.0 * g.share),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_attribution(path: &Path, report: &AttributionReport, k: Option<usize>) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["rank", "feature", "modality", "raw", "percent"])?;
    let take = k.unwrap_or(report.features.len());
    for f in report.features.iter().take(take) {
        w.write_record([
            f.rank.to_string(),
            f.feature.clone(),
            f.modality.name().to_string(),
            num(f.raw),
            num(f.percent),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub const STATS_HEADER: [&str; 12] = [
    "variable",
    "modality",
    "hc",
    "pd",
    "test",
    "statistic",
    "p",
    "p_fdr",
    "effect_size",
    "effect_kind",
    "significant",
    "warning",
];

pub fn write_stats(path: &Path, results: &[TestResult], q: f64) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(STATS_HEADER)?;
    for r in results {
        w.write_record([
            r.variable.clone(),
            r.modality.name().to_string(),
            r.summary_hc.clone(),
            r.summary_pd.clone(),
            r.test.name().to_string(),
            num(r.statistic),
            num(r.p),
            num(r.p_adjusted),
            num(r.effect),
            format!("{:?}", r.effect_kind),
            (r.p_adjusted <= q).to_string(),
            r.warning.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row of the consolidated ablation table.
pub struct AblationRow {
    pub name: String,
    pub summary: Option<Vec<MetricSummary>>,
    pub error: Option<String>,
}

pub fn write_ablation(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = writer(path)?;
    let metrics: Vec<&str> = METRIC_NAMES.iter().copied().chain(["composite"]).collect();
    let mut header = vec!["model".to_string()];
    for m in &metrics {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_sd"));
    }
    header.push("error".into());
    w.write_record(&header)?;
    for row in rows {
        let mut rec = vec![row.name.clone()];
        for m in &metrics {
            match row
                .summary
                .as_ref()
                .and_then(|s| s.iter().find(|x| x.metric == *m))
            {
                Some(s) => rec.extend([num(s.mean), num(s.sd)]),
                None => rec.extend([String::new(), String::new()]),
            }
        }
        rec.push(row.error.clone().unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
