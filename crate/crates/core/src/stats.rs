//! Two-group comparison toolkit: Mann-Whitney U, Cliff's delta, chi-square
//! with Cramér's V, Fisher's exact test and Benjamini-Hochberg adjustment.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};
use statrs::function::factorial::ln_binomial;

use crate::data::{Cell, DatasetSchema, RawTable};
use crate::error::{Error, Result};
use crate::modality::Modality;

/// Largest `n_x * n_y` for which the Mann-Whitney p-value is exact.
pub const EXACT_MANN_WHITNEY_LIMIT: usize = 20;

/// Relative tolerance when comparing hypergeometric probabilities.
const FISHER_RELATIVE_SLACK: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// U statistic of the first sample.
    pub u: f64,
    pub p: f64,
    pub exact: bool,
}

/// Midranks (1-based) of the pooled sample.
fn midranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

struct RankedSamples {
    ranks: Vec<f64>,
    ties: Vec<usize>,
    nx: usize,
    ny: usize,
    u: f64,
}

fn rank_samples(x: &[f64], y: &[f64]) -> Result<RankedSamples> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Degenerate(
            "Mann-Whitney needs two nonempty samples".into(),
        ));
    }
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    if pooled.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Mann-Whitney sample".into()));
    }
    let (ranks, ties) = midranks(&pooled);
    let nx = x.len();
    let rank_sum: f64 = ranks[..nx].iter().sum();
    let u = rank_sum - (nx * (nx + 1)) as f64 / 2.0;
    Ok(RankedSamples {
        ranks,
        ties,
        nx,
        ny: y.len(),
        u,
    })
}

/// Two-sided Mann-Whitney U test: exact for `n_x * n_y <= 20`, normal
/// approximation otherwise.
pub fn mann_whitney_u(x: &[f64], y: &[f64]) -> Result<MannWhitney> {
    let r = rank_samples(x, y)?;
    let exact = r.nx * r.ny <= EXACT_MANN_WHITNEY_LIMIT;
    let p = if exact { exact_p(&r) } else { normal_p(&r) };
    Ok(MannWhitney { u: r.u, p, exact })
}

/// Exact two-sided p over all splits of the observed midranks.
pub fn mann_whitney_exact_p(x: &[f64], y: &[f64]) -> Result<f64> {
    rank_samples(x, y).map(|r| exact_p(&r))
}

/// Normal approximation with tie-corrected variance and continuity correction.
pub fn mann_whitney_normal_p(x: &[f64], y: &[f64]) -> Result<f64> {
    rank_samples(x, y).map(|r| normal_p(&r))
}

fn normal_p(r: &RankedSamples) -> f64 {
    let n = (r.nx + r.ny) as f64;
    let nxy = (r.nx * r.ny) as f64;
    let tie_term: f64 =
        r.ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (n * (n - 1.0));
    let var = nxy / 12.0 * ((n + 1.0) - tie_term);
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((r.u - nxy / 2.0).abs() - 0.5).max(0.0) / var.sqrt();
    (2.0 * Normal::standard().sf(z)).min(1.0)
}

/// Permutation distribution of the first sample's rank sum over all
/// `C(n, nx)` splits of the observed midranks.
fn exact_p(r: &RankedSamples) -> f64 {
    let (ranks, nx, u_obs) = (&r.ranks, r.nx, r.u);
    // doubled midranks are integers
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max_sum: usize = doubled.iter().sum();
    // counts[k][s]: subsets of size k with doubled rank sum s
    let mut counts = vec![vec![0f64; max_sum + 1]; nx + 1];
    counts[0][0] = 1.0;
    for &r in &doubled {
        for k in (1..=nx).rev() {
            for s in (r..=max_sum).rev() {
                counts[k][s] += counts[k - 1][s - r];
            }
        }
    }
    let offset = nx * (nx + 1); // doubled n_x(n_x+1)/2
    let total: f64 = counts[nx].iter().sum();
    let ny = ranks.len() - nx;
    let center = (nx * ny) as f64; // doubled mean of U
    let dev_obs = (2.0 * u_obs - center).abs();
    let extreme: f64 = counts[nx]
        .iter()
        .enumerate()
        .filter(|&(s, &c)| c > 0.0 && s >= offset)
        .filter(|&(s, _)| ((s - offset) as f64 - center).abs() >= dev_obs - 1e-9)
        .map(|(_, &c)| c)
        .sum();
    (extreme / total).min(1.0)
}

/// `(#(x > y) - #(x < y)) / (n_x n_y)` over all cross pairs.
pub fn cliffs_delta(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Degenerate(
            "Cliff's delta needs two nonempty samples".into(),
        ));
    }
    let mut sorted_y = y.to_vec();
    sorted_y.sort_by(f64::total_cmp);
    let mut score = 0i64;
    for &v in x {
        let below = sorted_y.partition_point(|&w| w < v) as i64;
        let not_above = sorted_y.partition_point(|&w| w <= v) as i64;
        score += below - (sorted_y.len() as i64 - not_above);
    }
    Ok(score as f64 / (x.len() * y.len()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: usize,
    pub p: f64,
    pub cramers_v: f64,
    /// Some expected cell count is below 5.
    pub sparse: bool,
}

/// Pearson chi-square test of independence on an `r x c` count table.
pub fn chi_square_cramers_v(table: &[Vec<u64>]) -> Result<ChiSquare> {
    let r = table.len();
    let c = table.first().map_or(0, Vec::len);
    if r < 2 || c < 2 || table.iter().any(|row| row.len() != c) {
        return Err(Error::Shape(
            "chi-square needs a rectangular table of at least 2x2".into(),
        ));
    }
    let rows: Vec<f64> = table
        .iter()
        .map(|row| row.iter().sum::<u64>() as f64)
        .collect();
    let cols: Vec<f64> = (0..c)
        .map(|j| table.iter().map(|row| row[j]).sum::<u64>() as f64)
        .collect();
    if rows.iter().chain(&cols).any(|&m| m == 0.0) {
        return Err(Error::Degenerate(
            "contingency table has an empty row or column".into(),
        ));
    }
    let n: f64 = rows.iter().sum();
    let mut statistic = 0.0;
    let mut sparse = false;
    for (i, row) in table.iter().enumerate() {
        for (j, &o) in row.iter().enumerate() {
            let e = rows[i] * cols[j] / n;
            sparse |= e < 5.0;
            statistic += (o as f64 - e).powi(2) / e;
        }
    }
    let dof = (r - 1) * (c - 1);
    let p = ChiSquared::new(dof as f64)
        .map_err(|e| Error::Degenerate(e.to_string()))?
        .sf(statistic);
    let cramers_v = (statistic / (n * (r.min(c) - 1) as f64)).sqrt().min(1.0);
    Ok(ChiSquare {
        statistic,
        dof,
        p,
        cramers_v,
        sparse,
    })
}

/// Two-sided Fisher exact test: total probability of tables with the same
/// margins that are no more likely than the observed one.
pub fn fisher_exact_2x2(table: [[u64; 2]; 2]) -> f64 {
    let [[a, b], [c, d]] = table;
    let (r1, r2, c1) = (a + b, c + d, a + c);
    let n = r1 + r2;
    let ln_p = |k: u64| ln_binomial(r1, k) + ln_binomial(r2, c1 - k) - ln_binomial(n, c1);
    let lo = c1.saturating_sub(r2);
    let hi = r1.min(c1);
    let observed = ln_p(a).exp();
    let p: f64 = (lo..=hi)
        .map(|k| ln_p(k).exp())
        .filter(|&pk| pk <= observed * (1.0 + FISHER_RELATIVE_SLACK))
        .sum();
    p.min(1.0)
}

/// Benjamini-Hochberg step-up adjusted p-values, in input order.
pub fn bh_fdr(pvalues: &[f64]) -> Vec<f64> {
    let m = pvalues.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| pvalues[a].total_cmp(&pvalues[b]));
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for (rank, &i) in order.iter().enumerate().rev() {
        running = running.min(pvalues[i] * (m as f64 / (rank + 1) as f64));
        adjusted[i] = running.min(1.0);
    }
    adjusted
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    MannWhitney,
    ChiSquare,
    Fisher,
}

impl TestKind {
    pub fn name(self) -> &'static str {
        match self {
            TestKind::MannWhitney => "Mann-Whitney U",
            TestKind::ChiSquare => "Chi-square",
            TestKind::Fisher => "Fisher exact",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectKind {
    CliffsDelta,
    CramersV,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub variable: String,
    pub modality: Modality,
    pub test: TestKind,
    pub statistic: f64,
    pub p: f64,
    pub p_adjusted: f64,
    pub effect: f64,
    pub effect_kind: EffectKind,
    /// Median [IQR] or level counts for the negative class.
    pub summary_hc: String,
    pub summary_pd: String,
    pub warning: Option<String>,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn median_iqr(values: &[f64]) -> String {
    if values.is_empty() {
        return "n/a".into();
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    format!(
        "{:.2} [{:.2}, {:.2}]",
        quantile(&s, 0.5),
        quantile(&s, 0.25),
        quantile(&s, 0.75)
    )
}

const MISSING_LEVEL: &str = "nan";

fn numeric_test(name: &str, modality: Modality, groups: [Vec<f64>; 2]) -> Result<TestResult> {
    let [hc, pd] = groups;
    let (summary_hc, summary_pd) = (median_iqr(&hc), median_iqr(&pd));
    if hc.is_empty() || pd.is_empty() {
        return Ok(TestResult {
            variable: name.into(),
            modality,
            test: TestKind::MannWhitney,
            statistic: f64::NAN,
            p: 1.0,
            p_adjusted: 1.0,
            effect: 0.0,
            effect_kind: EffectKind::CliffsDelta,
            summary_hc,
            summary_pd,
            warning: Some("no observed values in one group".into()),
        });
    }
    let mw = mann_whitney_u(&hc, &pd)?;
    Ok(TestResult {
        variable: name.into(),
        modality,
        test: TestKind::MannWhitney,
        statistic: mw.u,
        p: mw.p,
        p_adjusted: mw.p,
        effect: cliffs_delta(&hc, &pd)?,
        effect_kind: EffectKind::CliffsDelta,
        summary_hc,
        summary_pd,
        warning: None,
    })
}

fn categorical_test(name: &str, modality: Modality, cells: &[(&Cell, u8)]) -> Result<TestResult> {
    let mut counts: BTreeMap<String, [u64; 2]> = BTreeMap::new();
    for &(cell, y) in cells {
        let level = match cell {
            Cell::Missing => MISSING_LEVEL.to_string(),
            Cell::Number(v) => v.to_string(),
            Cell::Category(s) => s.clone(),
        };
        counts.entry(level).or_default()[y as usize] += 1;
    }
    let describe = |class: usize| {
        let total: u64 = counts.values().map(|c| c[class]).sum();
        counts
            .iter()
            .map(|(level, c)| {
                let pct = if total == 0 {
                    0.0
                } else {
                    100.0 * c[class] as f64 / total as f64
                };
                format!("{level}: {} ({pct:.1}%)", c[class])
            })
            .collect::<Vec<_>>()
            .join("; ")
    };
    let (summary_hc, summary_pd) = (describe(0), describe(1));
    let table: Vec<Vec<u64>> = counts.values().map(|c| c.to_vec()).collect();
    let mut result = TestResult {
        variable: name.into(),
        modality,
        test: TestKind::ChiSquare,
        statistic: 0.0,
        p: 1.0,
        p_adjusted: 1.0,
        effect: 0.0,
        effect_kind: EffectKind::CramersV,
        summary_hc,
        summary_pd,
        warning: None,
    };
    if table.len() < 2 || table.iter().all(|c| c[0] == 0) || table.iter().all(|c| c[1] == 0) {
        result.warning = Some("single level or empty group; no test".into());
        return Ok(result);
    }
    let chi = chi_square_cramers_v(&table)?;
    result.statistic = chi.statistic;
    result.p = chi.p;
    result.effect = chi.cramers_v;
    if chi.sparse {
        if table.len() == 2 {
            result.test = TestKind::Fisher;
            result.p = fisher_exact_2x2([[table[0][0], table[0][1]], [table[1][0], table[1][1]]]);
        } else {
            result.warning = Some("expected count below 5; chi-square approximation".into());
        }
    }
    result.p_adjusted = result.p;
    Ok(result)
}

/// Class-0 versus class-1 comparison of every schema column, with
/// Benjamini-Hochberg adjustment across all columns. Sorted by adjusted p.
pub fn run_group_analysis(table: &RawTable, schema: &DatasetSchema) -> Result<Vec<TestResult>> {
    let labels = table.labels();
    let pd = labels.iter().filter(|&&y| y == 1).count();
    if pd < 2 || labels.len() - pd < 2 {
        return Err(Error::Degenerate(
            "group analysis needs at least two samples per class".into(),
        ));
    }
    let mut results = schema
        .columns
        .par_iter()
        .map(|spec| {
            let idx = table
                .column_index(&spec.name)
                .ok_or_else(|| Error::MissingColumn(spec.name.clone()))?;
            let cells: Vec<(&Cell, u8)> = table.column(idx).zip(labels.iter().copied()).collect();
            if spec.categorical {
                categorical_test(&spec.name, spec.modality, &cells)
            } else {
                let mut groups = [Vec::new(), Vec::new()];
                for (cell, y) in cells {
                    if let Some(v) = cell.as_number() {
                        groups[y as usize].push(v);
                    }
                }
                numeric_test(&spec.name, spec.modality, groups)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let adjusted = bh_fdr(&results.iter().map(|r| r.p).collect::<Vec<_>>());
    for (r, q) in results.iter_mut().zip(adjusted) {
        r.p_adjusted = q;
    }
    results.sort_by(|a, b| {
        a.p_adjusted
            .total_cmp(&b.p_adjusted)
            .then(a.p.total_cmp(&b.p))
    });
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mann_whitney_examples() {
        let r = mann_whitney_u(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(r.u, 0.0);
        assert!(r.exact);
        assert!((r.p - 1.0 / 3.0).abs() < 1e-12);

        let x: Vec<f64> = (0..30).map(|i| (i % 7) as f64).collect();
        let r = mann_whitney_u(&x, &x).unwrap();
        assert_eq!(r.u, 450.0);
        assert!(r.p > 0.99);

        let y: Vec<f64> = x.iter().map(|v| v + 1000.0).collect();
        assert!(mann_whitney_u(&x, &y).unwrap().p < 1e-6);
        assert!(mann_whitney_u(&[], &[1.0]).is_err());
    }

    #[test]
    fn cliffs_delta_examples() {
        assert_eq!(cliffs_delta(&[5.0, 6.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(
            cliffs_delta(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0]).unwrap(),
            0.0
        );
        assert_eq!(cliffs_delta(&[1.0, 3.0], &[2.0]).unwrap(), 0.0);
    }

    #[test]
    fn chi_square_examples() {
        let r = chi_square_cramers_v(&[vec![10, 20], vec![20, 10]]).unwrap();
        assert!((r.statistic - 20.0 / 3.0).abs() < 1e-12);
        assert!((r.cramers_v - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.dof, 1);
        let r = chi_square_cramers_v(&[vec![2, 4, 6], vec![3, 6, 9]]).unwrap();
        assert!(r.statistic.abs() < 1e-12);
        assert!(r.cramers_v.abs() < 1e-6);
        assert!((r.p - 1.0).abs() < 1e-12);
        assert!(chi_square_cramers_v(&[vec![0, 0], vec![1, 2]]).is_err());
    }

    #[test]
    fn fisher_examples() {
        assert!((fisher_exact_2x2([[2, 0], [0, 2]]) - 1.0 / 3.0).abs() < 1e-12);
        assert!((fisher_exact_2x2([[1, 1], [1, 1]]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bh_examples() {
        let adj = bh_fdr(&[0.005, 0.01, 0.03, 0.04]);
        for (a, e) in adj.iter().zip([0.02, 0.02, 0.04, 0.04]) {
            assert!((a - e).abs() < 1e-15);
        }
        assert_eq!(bh_fdr(&[0.3]), vec![0.3]);
        assert_eq!(bh_fdr(&[0.2; 5]), vec![0.2; 5]);
        // original order preserved
        let adj = bh_fdr(&[0.04, 0.005]);
        assert_eq!(adj, vec![0.04, 0.01]);
    }
}
