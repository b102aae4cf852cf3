use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Assignment of every row to one of `k` folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    /// `assignments[row]` is the fold holding that row.
    pub assignments: Vec<usize>,
    /// True when at least one subject contributes more than one row.
    pub grouped: bool,
}

impl FoldPlan {
    pub fn validation_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == fold)
            .collect()
    }

    pub fn training_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] != fold)
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.assignments {
            sizes[f] += 1;
        }
        sizes
    }
}

struct Group {
    rows: Vec<usize>,
    counts: [usize; 2],
}

/// Stratified k-fold assignment that keeps all rows of a subject together.
///
/// Groups are shuffled with `seed`, stably ordered by descending size (and
/// by class within equal sizes), then each is placed in the fold with the
/// largest class-weighted deficit against the per-fold target. Ties go to
/// the smaller fold, then the lower fold index.
pub fn make_folds<S: AsRef<str>>(
    labels: &[u8],
    subject_ids: &[S],
    k: usize,
    seed: u64,
) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Config(format!(
            "fold count must be at least 2, got {k}"
        )));
    }
    if labels.len() != subject_ids.len() {
        return Err(Error::Shape(format!(
            "{} labels but {} subject ids",
            labels.len(),
            subject_ids.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Degenerate(format!("label {bad} is not binary")));
    }

    let mut groups: Vec<Group> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for (row, (&y, id)) in labels.iter().zip(subject_ids).enumerate() {
        let g = *index.entry(id.as_ref()).or_insert_with(|| {
            groups.push(Group {
                rows: Vec::new(),
                counts: [0, 0],
            });
            groups.len() - 1
        });
        groups[g].rows.push(row);
        groups[g].counts[y as usize] += 1;
    }
    let grouped = groups.len() < labels.len();

    for class in 0..2u8 {
        let available = groups
            .iter()
            .filter(|g| g.counts[class as usize] > 0)
            .count();
        if available < k {
            return Err(Error::TooFewGroups {
                class,
                available,
                k,
            });
        }
    }

    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.shuffle(&mut rng::stream(seed, &[0xF01D]));
    order.sort_by(|&a, &b| {
        let (ga, gb) = (&groups[a], &groups[b]);
        gb.rows
            .len()
            .cmp(&ga.rows.len())
            // within a size, majority-negative groups first
            .then((ga.counts[1] * 2 > ga.rows.len()).cmp(&(gb.counts[1] * 2 > gb.rows.len())))
    });

    let totals = [
        labels.iter().filter(|&&y| y == 0).count() as f64,
        labels.iter().filter(|&&y| y == 1).count() as f64,
    ];
    let target = [totals[0] / k as f64, totals[1] / k as f64];
    let mut class_counts = vec![[0usize; 2]; k];
    let mut sizes = vec![0usize; k];
    let mut assignments = vec![usize::MAX; labels.len()];

    for g in order {
        let group = &groups[g];
        let deficit = |f: usize| -> f64 {
            (0..2)
                .map(|c| group.counts[c] as f64 * (target[c] - class_counts[f][c] as f64))
                .sum()
        };
        let mut best = 0;
        for f in 1..k {
            let (d, db) = (deficit(f), deficit(best));
            if d > db + 1e-9 || ((d - db).abs() <= 1e-9 && sizes[f] < sizes[best]) {
                best = f;
            }
        }
        for c in 0..2 {
            class_counts[best][c] += group.counts[c];
        }
        sizes[best] += group.rows.len();
        for &row in &group.rows {
            assignments[row] = best;
        }
    }

    Ok(FoldPlan {
        k,
        assignments,
        grouped,
    })
}
