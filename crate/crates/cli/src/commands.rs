//! One function per subcommand. Each takes a resolved [`RunConfig`], writes
//! its artifacts under the output directory and returns a short summary.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use safn_core::baselines::{run_baseline_cv, BaselineKind};
use safn_core::data::{generate_synthetic, load_csv, DatasetSchema, RawTable};
use safn_core::interpretability::{gate_contributions, AttributionAccumulator, GateReport};
use safn_core::metrics::MetricSummary;
use safn_core::model::{Checkpoint, Safn};
use safn_core::stats::run_group_analysis;
use safn_core::training::{
    predict, run_cv, train_one_fold, AblationSpec, CvFolds, CvResult, TrainOutcome,
};
use safn_core::Modality;

use crate::config::RunConfig;
use crate::output::{self, AblationRow};

pub const COHORT_CSV: &str = "cohort.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const SUMMARY_CSV: &str = "metrics_summary.csv";
pub const GATE_CSV: &str = "gate_report.csv";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const STATS_CSV: &str = "stats.csv";
pub const ATTRIBUTION_DIR: &str = "attribution";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const REPORT_MD: &str = "report.md";

fn prepare_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.output_dir().to_path_buf();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    cfg.write_snapshot(&dir)?;
    Ok(dir)
}

pub fn load_dataset(cfg: &RunConfig) -> Result<(RawTable, DatasetSchema)> {
    let manifest = cfg.manifest_path();
    let schema = DatasetSchema::load(&manifest)
        .with_context(|| format!("loading manifest {}", manifest.display()))?;
    let data = cfg.data_path();
    let table = load_csv(&data, &schema).with_context(|| format!("loading {}", data.display()))?;
    Ok((table, schema))
}

fn metric<'a>(summary: &'a [MetricSummary], name: &str) -> &'a MetricSummary {
    summary
        .iter()
        .find(|s| s.metric == name)
        .expect("aggregate covers every metric")
}

fn headline(summary: &[MetricSummary]) -> String {
    ["roc_auc", "balanced_accuracy", "f1", "composite"]
        .iter()
        .map(|m| format!("{m} {}", output::format_mean_sd(metric(summary, m))))
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn gen_data(cfg: &RunConfig) -> Result<String> {
    prepare_dir(cfg)?;
    let data = generate_synthetic(&cfg.generator, cfg.seed)?;
    let csv_path = cfg.data_path();
    if let Some(parent) = csv_path.parent() {
        fs::create_dir_all(parent)?;
    }
    data.table.write_csv(&data.schema, &csv_path)?;
    data.schema.save(cfg.manifest_path())?;
    let informative = csv_path.with_extension("informative.json");
    fs::write(
        &informative,
        serde_json::to_string_pretty(&data.informative)? + "\n",
    )?;
    Ok(format!(
        "wrote {} rows x {} features to {}",
        data.table.len(),
        data.table.columns.len(),
        csv_path.display()
    ))
}

fn write_logs(dir: &Path, stem: &str, outcome: &TrainOutcome) -> Result<()> {
    output::write_rows(&dir.join(format!("{stem}_epochs.csv")), &outcome.epochs)?;
    output::write_rows(&dir.join(format!("{stem}_steps.csv")), &outcome.steps)
}

#[derive(Serialize)]
struct PredictionRow<'a> {
    fold: usize,
    subject_id: &'a str,
    label: u8,
    prob: f64,
}

fn pooled_gates(result: &CvResult) -> Result<GateReport> {
    let active = result.folds[0].checkpoint.config.wiring.active_modalities();
    let samples: Vec<Vec<f64>> = result
        .folds
        .iter()
        .flat_map(|f| f.outcome.val_predictions.iter().map(|p| p.gates.clone()))
        .collect();
    Ok(gate_contributions(&active, &samples)?)
}

/// Everything `cv` writes for one run, rooted at `dir`.
fn write_cv_outputs(dir: &Path, table: &RawTable, result: &CvResult) -> Result<()> {
    let reports = result.reports();
    output::write_metrics(&dir.join(METRICS_CSV), &reports)?;
    output::write_summary(&dir.join(SUMMARY_CSV), &result.aggregate)?;
    output::write_curve(&dir.join("roc_curve.csv"), &result.mean_roc, "fpr", "tpr")?;
    output::write_curve(
        &dir.join("pr_curve.csv"),
        &result.mean_pr,
        "recall",
        "precision",
    )?;
    output::write_confusion(&dir.join("confusion_matrix.csv"), result.mean_confusion)?;
    output::write_gate_report(&dir.join(GATE_CSV), &pooled_gates(result)?)?;
    let mut preds = Vec::new();
    for f in &result.folds {
        write_logs(
            &dir.join("logs"),
            &format!("fold{}", f.fold + 1),
            &f.outcome,
        )?;
        let ckpt = dir
            .join(CHECKPOINT_DIR)
            .join(format!("fold{}.json", f.fold + 1));
        fs::create_dir_all(ckpt.parent().expect("joined path"))?;
        f.checkpoint.save(&ckpt)?;
        for ((&row, subject), p) in f
            .validation_rows
            .iter()
            .zip(&f.checkpoint.validation_subjects)
            .zip(&f.outcome.val_predictions)
        {
            preds.push(PredictionRow {
                fold: f.fold + 1,
                subject_id: subject,
                label: table.rows[row].label,
                prob: p.prob,
            });
        }
    }
    output::write_rows(&dir.join("predictions.csv"), &preds)
}

pub fn cv(cfg: &RunConfig) -> Result<String> {
    let dir = prepare_dir(cfg)?;
    let (table, schema) = load_dataset(cfg)?;
    let result = run_cv(
        &table, &schema, &cfg.model, &cfg.loss, &cfg.optim, None, &cfg.cv,
    )?;
    write_cv_outputs(&dir, &table, &result)?;
    Ok(format!(
        "{}-fold cv: {}",
        cfg.cv.k,
        headline(&result.aggregate)
    ))
}

/// Train on one fold's training rows and validate on its held-out rows.
pub fn train(cfg: &RunConfig, fold: usize) -> Result<String> {
    if fold >= cfg.cv.k {
        return Err(
            crate::UsageError(format!("fold {fold} out of range for k = {}", cfg.cv.k)).into(),
        );
    }
    let dir = prepare_dir(cfg)?.join("train");
    let (table, schema) = load_dataset(cfg)?;
    let folds = CvFolds::prepare(&table, &schema, &cfg.cv)?;
    let data = folds.fold(fold)?;
    let net = Safn::new(cfg.model.clone(), data.preprocessor.widths())?;
    let outcome = train_one_fold(&net, &data.train, &data.val, &cfg.loss, &cfg.optim)?;
    fs::create_dir_all(&dir)?;
    let mut ckpt = Checkpoint::new(&net, outcome.params.clone());
    ckpt.validation_subjects = data.validation_subjects;
    ckpt.preprocessor = Some(data.preprocessor);
    ckpt.save(dir.join("checkpoint.json"))?;
    write_logs(&dir, "train", &outcome)?;
    output::write_metrics(
        &dir.join(METRICS_CSV),
        std::slice::from_ref(&outcome.report),
    )?;
    Ok(format!(
        "fold {fold}: best epoch {}, composite {:.4}",
        outcome.best_epoch, outcome.best_composite
    ))
}

fn slug(name: &str) -> String {
    let mut s: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect();
    while s.contains("__") {
        s = s.replace("__", "_");
    }
    s.trim_matches('_').to_string()
}

/// Full model, every configured variant, then the baselines. A failing row
/// is recorded and the sweep continues; the command fails afterwards.
pub fn ablate(cfg: &RunConfig) -> Result<String> {
    let dir = prepare_dir(cfg)?;
    let (table, schema) = load_dataset(cfg)?;
    let mut rows = Vec::new();
    let mut first_error: Option<anyhow::Error> = None;
    let mut record = |name: String, r: Result<Vec<MetricSummary>>| match r {
        Ok(summary) => rows.push(AblationRow {
            name,
            summary: Some(summary),
            error: None,
        }),
        Err(e) => {
            rows.push(AblationRow {
                name,
                summary: None,
                error: Some(format!("{e:#}")),
            });
            first_error.get_or_insert(e);
        }
    };

    let mut specs = vec![("SAFN (full)".to_string(), AblationSpec::default())];
    specs.extend(
        cfg.ablation
            .variants
            .iter()
            .map(|v| (v.name.clone(), v.spec.clone())),
    );
    for (name, spec) in specs {
        let sub = dir.join("ablation").join(slug(&name));
        let r = run_cv(
            &table,
            &schema,
            &cfg.model,
            &cfg.loss,
            &cfg.optim,
            Some(&spec),
            &cfg.cv,
        )
        .map_err(anyhow::Error::from)
        .and_then(|res| {
            fs::create_dir_all(&sub)?;
            write_cv_outputs(&sub, &table, &res)?;
            Ok(res.aggregate)
        });
        record(name, r);
    }
    if cfg.ablation.baselines {
        let kinds = [
            (
                "Logistic Regression",
                BaselineKind::LogisticRegression {
                    c: cfg.ablation.logreg_c,
                    class_weighted: true,
                },
            ),
            (
                "Plain MLP (concat all features)",
                BaselineKind::Mlp(cfg.ablation.mlp.clone()),
            ),
        ];
        for (name, kind) in kinds {
            let r = run_baseline_cv(&table, &schema, &kind, &cfg.cv)
                .map(|res| res.aggregate)
                .map_err(Into::into);
            record(name.to_string(), r);
        }
    }
    output::write_ablation(&dir.join(ABLATION_CSV), &rows)?;
    match first_error {
        Some(e) => Err(e.context("at least one ablation row failed; see ablation.csv")),
        None => Ok(format!("{} ablation rows written", rows.len())),
    }
}

fn checkpoint_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| safn_core::Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(
            safn_core::Error::Degenerate(format!("no checkpoints in {}", dir.display())).into(),
        );
    }
    Ok(files)
}

/// Attribution and gate shares over each checkpoint's own validation rows.
pub fn attribute(cfg: &RunConfig, checkpoints: Option<&Path>) -> Result<String> {
    let dir = prepare_dir(cfg)?;
    let ckpt_dir = checkpoints.map_or_else(|| dir.join(CHECKPOINT_DIR), Path::to_path_buf);
    let files = checkpoint_files(&ckpt_dir)?;
    let (table, _) = load_dataset(cfg)?;

    let mut acc = AttributionAccumulator::new();
    let mut gate_samples = Vec::new();
    let mut active: Option<Vec<Modality>> = None;
    for path in &files {
        let ckpt = Checkpoint::load(path)?;
        let model = ckpt.model()?;
        let Some(prep) = &ckpt.preprocessor else {
            bail!(safn_core::Error::Schema(format!(
                "{} carries no preprocessor",
                path.display()
            )));
        };
        let subjects: HashSet<&str> = ckpt
            .validation_subjects
            .iter()
            .map(String::as_str)
            .collect();
        let rows: Vec<usize> = (0..table.len())
            .filter(|&i| subjects.contains(table.rows[i].subject_id.as_str()))
            .collect();
        let names: Vec<&str> = prep.columns.iter().map(|c| c.name.as_str()).collect();
        let bundles = prep.apply(&table.select(&rows).project(&names)?)?;
        acc.add(
            &model,
            &ckpt.params,
            &bundles,
            &prep.feature_names(),
            cfg.attribution.target,
        )?;
        let wiring = model.config.wiring.active_modalities();
        if active.get_or_insert_with(|| wiring.clone()) != &wiring {
            bail!(safn_core::Error::Schema(
                "checkpoints disagree on active modalities".into()
            ));
        }
        gate_samples.extend(
            predict(&model, &ckpt.params, &bundles)?
                .into_iter()
                .map(|p| p.gates),
        );
    }
    let report = acc.finish()?;
    let gates = gate_contributions(active.as_deref().unwrap_or(&[]), &gate_samples)?;
    let out = dir.join(ATTRIBUTION_DIR);
    let k = cfg.attribution.top_k.min(report.features.len());
    output::write_attribution(&out.join("attribution.csv"), &report, None)?;
    output::write_attribution(&out.join("top_k.csv"), &report, Some(k))?;
    output::write_gate_report(&out.join(GATE_CSV), &gates)?;
    let lead = &report.features[0];
    Ok(format!(
        "{} samples from {} checkpoints; top feature {} ({:.2}%)",
        report.samples,
        files.len(),
        lead.feature,
        lead.percent
    ))
}

pub fn stats(cfg: &RunConfig) -> Result<String> {
    let dir = prepare_dir(cfg)?;
    let (table, schema) = load_dataset(cfg)?;
    let results = run_group_analysis(&table, &schema)?;
    output::write_stats(&dir.join(STATS_CSV), &results, cfg.stats.q)?;
    let flagged = results
        .iter()
        .filter(|r| r.p_adjusted <= cfg.stats.q)
        .count();
    Ok(format!(
        "{} variables tested, {flagged} significant at q = {}",
        results.len(),
        cfg.stats.q
    ))
}

fn csv_to_markdown(path: &Path, limit: usize) -> Result<String> {
    let mut reader =
        csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let header: Vec<String> = reader.headers()?.iter().map(String::from).collect();
    let mut md = format!(
        "| {} |\n|{}\n",
        header.join(" | "),
        "---|".repeat(header.len())
    );
    for rec in reader.records().take(limit) {
        let rec = rec?;
        md.push_str(&format!(
            "| {} |\n",
            rec.iter().collect::<Vec<_>>().join(" | ")
        ));
    }
    Ok(md)
}

/// Collect whichever tables exist in the output directory into one file.
pub fn report(cfg: &RunConfig) -> Result<String> {
    let dir = cfg.output_dir().to_path_buf();
    let sections = [
        (
            "Cross-validated performance",
            dir.join(SUMMARY_CSV),
            usize::MAX,
        ),
        ("Per-fold metrics", dir.join(METRICS_CSV), usize::MAX),
        (
            "Modality gate contributions",
            dir.join(GATE_CSV),
            usize::MAX,
        ),
        ("Ablation study", dir.join(ABLATION_CSV), usize::MAX),
        (
            "Most influential features",
            dir.join(ATTRIBUTION_DIR).join("top_k.csv"),
            usize::MAX,
        ),
        ("Group comparisons (top 25)", dir.join(STATS_CSV), 25),
    ];
    let mut md = String::from("# SAFN run report\n");
    let mut found = 0;
    for (title, path, limit) in sections {
        if path.exists() {
            md.push_str(&format!(
                "\n## {title}\n\n{}",
                csv_to_markdown(&path, limit)?
            ));
            found += 1;
        }
    }
    if found == 0 {
        return Err(safn_core::Error::Degenerate(format!(
            "no result tables found in {}",
            dir.display()
        ))
        .into());
    }
    let out = dir.join(REPORT_MD);
    fs::write(&out, md).with_context(|| format!("writing {}", out.display()))?;
    Ok(format!("{found} sections written to {}", out.display()))
}
