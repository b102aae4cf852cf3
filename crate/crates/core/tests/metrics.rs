use proptest::prelude::*;
use safn_core::metrics::{
    best_f1_threshold, confusion, pr_auc, roc_auc, threshold_grid, thresholded_metrics,
};

fn pair_count_auc(probs: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &pi) in probs.iter().enumerate() {
        for (j, &pj) in probs.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if pi > pj {
                    wins += 1.0;
                } else if pi == pj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn brute_force_ap(probs: &[f64], labels: &[u8]) -> f64 {
    let mut thresholds: Vec<f64> = probs.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let n_pos = labels.iter().filter(|&&y| y == 1).count() as f64;
    let mut prev = 0.0;
    let mut ap = 0.0;
    for t in thresholds {
        let tp = probs
            .iter()
            .zip(labels)
            .filter(|(&p, &y)| p >= t && y == 1)
            .count() as f64;
        let called = probs.iter().filter(|&&p| p >= t).count() as f64;
        let recall = tp / n_pos;
        ap += (recall - prev) * (tp / called);
        prev = recall;
    }
    ap
}

// coarse scores so that ties are common
fn fixture() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..=12)
        .prop_flat_map(|n| {
            (
                prop::collection::vec(0u8..8, n),
                prop::collection::vec(0u8..2, n),
            )
        })
        .prop_map(|(s, y)| (s.into_iter().map(|v| v as f64 / 7.0).collect(), y))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn roc_matches_pair_counting((probs, labels) in fixture()) {
        let both = labels.contains(&0) && labels.contains(&1);
        prop_assume!(both);
        let c = roc_auc(&probs, &labels).unwrap();
        prop_assert!((c.auc - pair_count_auc(&probs, &labels)).abs() < 1e-12);
        prop_assert_eq!(c.points.first().copied(), Some((0.0, 0.0)));
        prop_assert_eq!(c.points.last().copied(), Some((1.0, 1.0)));
        prop_assert!(c.points.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1));
    }

    #[test]
    fn pr_matches_step_summation((probs, labels) in fixture()) {
        prop_assume!(labels.contains(&1));
        let c = pr_auc(&probs, &labels).unwrap();
        prop_assert!((c.auc - brute_force_ap(&probs, &labels)).abs() < 1e-12);
        prop_assert!(c.points.windows(2).all(|w| w[0].0 <= w[1].0));
        prop_assert!(c.auc >= 0.0 && c.auc <= 1.0 + 1e-15);
    }

    #[test]
    fn flip_duality((probs, labels) in fixture()) {
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let fp: Vec<f64> = probs.iter().map(|p| 1.0 - p).collect();
        let fl: Vec<u8> = labels.iter().map(|y| 1 - y).collect();
        let a = roc_auc(&probs, &labels).unwrap().auc;
        let b = roc_auc(&fp, &fl).unwrap().auc;
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn auc_invariant_under_monotone_transform((probs, labels) in fixture()) {
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let t: Vec<f64> = probs.iter().map(|p| (3.0 * p).exp() - 7.0).collect();
        prop_assert_eq!(roc_auc(&probs, &labels).unwrap().auc, roc_auc(&t, &labels).unwrap().auc);
        prop_assert_eq!(pr_auc(&probs, &labels).unwrap().auc, pr_auc(&t, &labels).unwrap().auc);
    }

    #[test]
    fn balanced_accuracy_identity((probs, labels) in fixture(), t in 0.0f64..1.0) {
        let cm = confusion(&probs, &labels, t).unwrap();
        prop_assert_eq!(cm.total(), probs.len());
        let m = thresholded_metrics(&cm);
        let pos = labels.iter().filter(|&&y| y == 1).count();
        let neg = labels.len() - pos;
        let rp = if pos == 0 { 0.0 } else { cm.tp as f64 / pos as f64 };
        let rn = if neg == 0 { 0.0 } else { cm.tn as f64 / neg as f64 };
        prop_assert!((m.balanced_accuracy - (rp + rn) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn best_threshold_is_grid_argmax((probs, labels) in fixture()) {
        let (t, f1) = best_f1_threshold(&probs, &labels).unwrap();
        prop_assert!((0.05..=0.95).contains(&t));
        for g in threshold_grid() {
            let v = thresholded_metrics(&confusion(&probs, &labels, g).unwrap()).f1;
            prop_assert!(v <= f1);
            if g < t {
                prop_assert!(v < f1);
            }
        }
    }
}
