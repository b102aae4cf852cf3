//! Run configuration: a JSON file merged with command-line overrides, and
//! the resolved snapshot written next to every command's outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use safn_core::baselines::MlpBaselineConfig;
use safn_core::data::GeneratorConfig;
use safn_core::interpretability::AttributionTarget;
use safn_core::model::SafnConfig;
use safn_core::objective::LossConfig;
use safn_core::training::{AblationSpec, CvConfig, OptimConfig};

use crate::UsageError;

pub const SNAPSHOT_FILE: &str = "resolved_config.json";
pub const DEFAULT_OUTPUT_DIR: &str = "safn_output";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedAblation {
    pub name: String,
    #[serde(flatten)]
    pub spec: AblationSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub variants: Vec<NamedAblation>,
    /// Append logistic-regression and plain-MLP rows.
    pub baselines: bool,
    pub logreg_c: f64,
    pub mlp: MlpBaselineConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            variants: AblationSpec::standard_grid()
                .into_iter()
                .map(|(name, spec)| NamedAblation { name, spec })
                .collect(),
            baselines: true,
            logreg_c: 1.0,
            mlp: MlpBaselineConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionConfig {
    pub top_k: usize,
    pub target: AttributionTarget,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        AttributionConfig {
            top_k: 20,
            target: AttributionTarget::Probability,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    /// FDR level used for the `significant` column.
    pub q: f64,
}

impl Default for StatsConfig {
    fn default() -> Self {
        StatsConfig { q: 0.10 }
    }
}

/// Everything a command needs. `seed` is the master seed: it replaces the
/// optimiser, fold and baseline seeds when the config is resolved.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub generator: GeneratorConfig,
    pub model: SafnConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub cv: CvConfig,
    pub ablation: AblationConfig,
    pub attribution: AttributionConfig,
    pub stats: StatsConfig,
}

/// Flag values that win over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub folds: Option<usize>,
    pub epochs: Option<usize>,
    pub patience: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub d_model: Option<usize>,
    pub n_layers: Option<usize>,
    pub n_pd: Option<usize>,
    pub n_hc: Option<usize>,
    pub top_k: Option<usize>,
    pub target: Option<AttributionTarget>,
    pub q: Option<f64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("config {}: {e}", path.display())).into())
    }

    /// Apply overrides and propagate the master seed.
    pub fn resolve(mut self, o: &Overrides) -> Result<RunConfig> {
        macro_rules! set {
            ($field:expr, $value:expr) => {
                if let Some(v) = $value.clone() {
                    $field = v;
                }
            };
        }
        set!(self.seed, o.seed);
        set!(self.cv.jobs, o.jobs);
        set!(self.cv.k, o.folds);
        set!(self.optim.epochs, o.epochs);
        set!(self.optim.patience, o.patience);
        set!(self.optim.batch_size, o.batch_size);
        set!(self.optim.lr, o.lr);
        set!(self.model.d_model, o.d_model);
        set!(self.model.n_layers, o.n_layers);
        set!(self.generator.n_pd, o.n_pd);
        set!(self.generator.n_hc, o.n_hc);
        set!(self.attribution.top_k, o.top_k);
        set!(self.attribution.target, o.target);
        set!(self.stats.q, o.q);
        if o.output_dir.is_some() {
            self.output_dir = o.output_dir.clone();
        }
        if o.data.is_some() {
            self.data = o.data.clone();
        }
        if o.manifest.is_some() {
            self.manifest = o.manifest.clone();
        }
        if o.epochs.is_some() && o.patience.is_none() {
            self.optim.patience = self.optim.patience.min(self.optim.epochs);
        }
        self.optim.seed = self.seed;
        self.cv.fold_seed = self.seed;
        self.ablation.mlp.seed = self.seed;
        let out = self
            .output_dir
            .get_or_insert_with(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
            .clone();
        // pin the dataset paths so the snapshot stands alone
        let data = self
            .data
            .get_or_insert_with(|| out.join(crate::commands::COHORT_CSV))
            .clone();
        self.manifest
            .get_or_insert_with(|| data.with_extension("json"));
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let usage = |e: safn_core::Error| anyhow::Error::from(UsageError(e.to_string()));
        self.model.validate().map_err(usage)?;
        self.loss.validate().map_err(usage)?;
        self.optim.validate().map_err(usage)?;
        if self.cv.k < 2 {
            return Err(UsageError(format!("need at least 2 folds, got {}", self.cv.k)).into());
        }
        if !(self.stats.q > 0.0 && self.stats.q < 1.0) {
            return Err(UsageError(format!("q {} outside (0, 1)", self.stats.q)).into());
        }
        Ok(())
    }

    pub fn output_dir(&self) -> &Path {
        self.output_dir
            .as_deref()
            .unwrap_or(Path::new(DEFAULT_OUTPUT_DIR))
    }

    /// Dataset CSV: explicit path, else the generator's default location.
    pub fn data_path(&self) -> PathBuf {
        self.data
            .clone()
            .unwrap_or_else(|| self.output_dir().join(crate::commands::COHORT_CSV))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.manifest
            .clone()
            .unwrap_or_else(|| self.data_path().with_extension("json"))
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(SNAPSHOT_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_win_and_seed_propagates() {
        let base = RunConfig {
            seed: 1,
            ..Default::default()
        };
        let o = Overrides {
            seed: Some(9),
            epochs: Some(3),
            jobs: Some(2),
            ..Default::default()
        };
        let r = base.resolve(&o).unwrap();
        assert_eq!(
            (r.seed, r.optim.seed, r.cv.fold_seed, r.ablation.mlp.seed),
            (9, 9, 9, 9)
        );
        assert_eq!(r.optim.epochs, 3);
        assert_eq!(r.optim.patience, 3);
        assert_eq!(r.cv.jobs, 2);
        assert_eq!(r.output_dir(), Path::new(DEFAULT_OUTPUT_DIR));
    }

    #[test]
    fn snapshot_round_trips() {
        let r = RunConfig::default().resolve(&Overrides::default()).unwrap();
        let text = serde_json::to_string(&r).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.resolve(&Overrides::default()).unwrap(), r);
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"sed": 3}"#).unwrap();
        let err = RunConfig::load(&p).unwrap_err();
        assert!(err.downcast_ref::<UsageError>().is_some());
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let r: RunConfig = serde_json::from_str(r#"{"model": {"d_model": 16}}"#).unwrap();
        assert_eq!(r.model.d_model, 16);
        assert_eq!(r.model.n_heads, SafnConfig::default().n_heads);
        assert_eq!(r.ablation.variants.len(), 7);
    }
}
