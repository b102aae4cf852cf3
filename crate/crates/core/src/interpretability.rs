//! Gradient x Input feature attribution and modality gate shares.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ModalityBundle;
use crate::error::{Error, Result};
use crate::modality::{Modality, PerModality};
use crate::model::{OutputGrad, Safn};

/// Quantity whose input gradient is taken.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionTarget {
    #[default]
    Probability,
    Logit,
}

/// Signed `(d target / d x_f) * x_f` for every input feature of one sample.
/// Masked modalities get empty vectors.
pub fn sample_attribution(
    model: &Safn,
    params: &[f64],
    bundle: &ModalityBundle,
    target: AttributionTarget,
) -> Result<PerModality<Vec<f64>>> {
    let trace = model.forward(bundle, params, false, 0)?;
    let dlogit = match target {
        AttributionTarget::Probability => trace.prob * (1.0 - trace.prob),
        AttributionTarget::Logit => 1.0,
    };
    let mut scratch = vec![0.0; params.len()];
    let dx = model.backward(&trace, params, &OutputGrad::logit(dlogit), &mut scratch)?;
    Ok(PerModality::from_fn(|m| {
        dx[m]
            .iter()
            .zip(bundle.block(m))
            .map(|(g, x)| g * x)
            .collect()
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureAttribution {
    pub feature: String,
    pub modality: Modality,
    /// Sum of absolute attributions over all samples.
    pub raw: f64,
    pub percent: f64,
    /// 1-based position by descending share, ties by name.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    /// Sorted by rank.
    pub features: Vec<FeatureAttribution>,
    pub samples: usize,
}

/// Collects absolute attributions by feature name, so that folds with
/// different fitted encoders can be pooled.
#[derive(Debug, Clone, Default)]
pub struct AttributionAccumulator {
    totals: BTreeMap<String, (Modality, f64)>,
    samples: usize,
}

impl AttributionAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// `names[m]` labels the encoded features of modality `m`.
    pub fn add(
        &mut self,
        model: &Safn,
        params: &[f64],
        bundles: &[ModalityBundle],
        names: &PerModality<Vec<String>>,
        target: AttributionTarget,
    ) -> Result<()> {
        let per_sample: Vec<PerModality<Vec<f64>>> = bundles
            .par_iter()
            .map(|b| sample_attribution(model, params, b, target))
            .collect::<Result<_>>()?;
        for attr in per_sample {
            for m in model.config.wiring.active_modalities() {
                if names[m].len() != attr[m].len() {
                    return Err(Error::Shape(format!(
                        "{} names for {} {} features",
                        names[m].len(),
                        attr[m].len(),
                        m
                    )));
                }
                for (name, a) in names[m].iter().zip(&attr[m]) {
                    self.totals.entry(name.clone()).or_insert((m, 0.0)).1 += a.abs();
                }
            }
        }
        self.samples += bundles.len();
        Ok(())
    }

    pub fn finish(self) -> Result<AttributionReport> {
        if self.samples == 0 {
            return Err(Error::Degenerate("no samples attributed".into()));
        }
        let total: f64 = self.totals.values().map(|(_, v)| v).sum();
        if !(total > 0.0) {
            return Err(Error::Degenerate("all attributions are zero".into()));
        }
        let mut features: Vec<FeatureAttribution> = self
            .totals
            .into_iter()
            .map(|(feature, (modality, raw))| FeatureAttribution {
                feature,
                modality,
                raw,
                percent: 100.0 * raw / total,
                rank: 0,
            })
            .collect();
        features.sort_by(|a, b| {
            b.percent
                .total_cmp(&a.percent)
                .then_with(|| a.feature.cmp(&b.feature))
        });
        for (i, f) in features.iter_mut().enumerate() {
            f.rank = i + 1;
        }
        Ok(AttributionReport {
            features,
            samples: self.samples,
        })
    }
}

/// Attribution over one set of samples with one checkpoint.
pub fn grad_x_input(
    model: &Safn,
    params: &[f64],
    bundles: &[ModalityBundle],
    names: &PerModality<Vec<String>>,
    target: AttributionTarget,
) -> Result<AttributionReport> {
    let mut acc = AttributionAccumulator::new();
    acc.add(model, params, bundles, names, target)?;
    acc.finish()
}

pub fn top_k_features(report: &AttributionReport, k: usize) -> Result<&[FeatureAttribution]> {
    if k > report.features.len() {
        return Err(Error::Config(format!(
            "asked for {k} features, report has {}",
            report.features.len()
        )));
    }
    Ok(&report.features[..k])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateShare {
    pub modality: Modality,
    pub raw_mean: f64,
    /// `raw / sum(raw)`, in [0, 1].
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub gates: Vec<GateShare>,
}

impl GateReport {
    /// Normalise per-modality mean gates; absent modalities are skipped.
    pub fn from_means(means: &PerModality<Option<f64>>) -> Result<GateReport> {
        let present: Vec<(Modality, f64)> = means
            .iter()
            .filter_map(|(m, v)| v.map(|x| (m, x)))
            .collect();
        let total: f64 = present.iter().map(|(_, v)| v).sum();
        if present.is_empty() || !(total > 0.0) {
            return Err(Error::Degenerate(
                "no positive gate means to normalise".into(),
            ));
        }
        Ok(GateReport {
            gates: present
                .into_iter()
                .map(|(modality, raw_mean)| GateShare {
                    modality,
                    raw_mean,
                    share: raw_mean / total,
                })
                .collect(),
        })
    }

    pub fn share(&self, m: Modality) -> Option<f64> {
        self.gates.iter().find(|g| g.modality == m).map(|g| g.share)
    }

    /// Modality with the largest share.
    pub fn leader(&self) -> Modality {
        self.gates
            .iter()
            .max_by(|a, b| a.share.total_cmp(&b.share))
            .expect("report is nonempty")
            .modality
    }
}

/// Mean gate per modality over every sample (pooled across folds), then
/// normalised. `active[j]` names the modality of gate `j` in each sample.
pub fn gate_contributions(active: &[Modality], samples: &[Vec<f64>]) -> Result<GateReport> {
    if samples.is_empty() {
        return Err(Error::Degenerate("no gate samples".into()));
    }
    if samples.iter().any(|s| s.len() != active.len()) {
        return Err(Error::Shape(
            "gate vectors do not match active modalities".into(),
        ));
    }
    let n = samples.len() as f64;
    let means = PerModality::from_fn(|m| {
        let j = active.iter().position(|&a| a == m)?;
        Some(samples.iter().map(|s| s[j]).sum::<f64>() / n)
    });
    GateReport::from_means(&means)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_gate_means_normalise() {
        let active = Modality::ALL;
        let samples = vec![vec![0.118, 0.032, 0.029, 0.018]];
        // fusion order is ct, clinical, vol, demographic
        let r = gate_contributions(&active, &samples).unwrap();
        let pct: Vec<f64> = r.gates.iter().map(|g| 100.0 * g.share).collect();
        for (p, e) in pct.iter().zip([59.9, 16.2, 14.7, 9.1]) {
            assert!((p - e).abs() < 0.1, "{p} vs {e}");
        }
        assert!((r.gates.iter().map(|g| g.share).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn equal_and_scaled_means() {
        let active = Modality::ALL;
        let r = gate_contributions(&active, &[vec![0.3; 4]]).unwrap();
        assert!(r.gates.iter().all(|g| (g.share - 0.25).abs() < 1e-15));
        let a = gate_contributions(&active, &[vec![0.1, 0.2, 0.3, 0.4]]).unwrap();
        let b = gate_contributions(&active, &[vec![0.7, 1.4, 2.1, 2.8]]).unwrap();
        for (x, y) in a.gates.iter().zip(&b.gates) {
            assert!((x.share - y.share).abs() < 1e-12);
        }
    }

    #[test]
    fn ties_rank_alphabetically() {
        let mut acc = AttributionAccumulator::new();
        acc.totals.insert("b".into(), (Modality::Clinical, 1.0));
        acc.totals.insert("a".into(), (Modality::Clinical, 1.0));
        acc.totals.insert("c".into(), (Modality::MriCt, 2.0));
        acc.samples = 1;
        let r = acc.finish().unwrap();
        let names: Vec<&str> = r.features.iter().map(|f| f.feature.as_str()).collect();
        assert_eq!(names, ["c", "a", "b"]);
        assert_eq!(top_k_features(&r, 3).unwrap().len(), 3);
        assert!(top_k_features(&r, 4).is_err());
    }
}
