mod common;

use common::{encoded_split, rng, small_cohort};
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;
use safn_core::baselines::{
    logreg_objective, train_logreg, train_mlp_baseline, weighted_bce, Mlp, MlpBaselineConfig,
};
use safn_core::gradcheck::{central_difference, relative_error};

fn design(seed: u64, n: usize, d: usize) -> (Vec<Vec<f64>>, Vec<u8>) {
    let mut r = rng(seed);
    let truth: Vec<f64> = (0..d).map(|_| r.random_range(-1.5..1.5)).collect();
    let x: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| r.random_range(-2.0..2.0)).collect())
        .collect();
    let y = x
        .iter()
        .map(|row| {
            let s: f64 = row.iter().zip(&truth).map(|(a, b)| a * b).sum();
            u8::from(r.random::<f64>() < 1.0 / (1.0 + (-s).exp()))
        })
        .collect();
    (x, y)
}

#[test]
fn logreg_gradient_vanishes_at_solution() {
    let (x, y) = design(1, 80, 5);
    let fit = train_logreg(&x, &y, 1.0, true, None).unwrap();
    let n1 = y.iter().filter(|&&v| v == 1).count() as f64;
    let n = y.len() as f64;
    let sw: Vec<f64> = y
        .iter()
        .map(|&v| {
            if v == 1 {
                n / (2.0 * n1)
            } else {
                n / (2.0 * (n - n1))
            }
        })
        .collect();
    let mut params = fit.weights.clone();
    params.push(fit.bias);
    // recompute the gradient independently of the solver
    let mut grad = vec![0.0; params.len()];
    for ((row, &label), &w) in x.iter().zip(&y).zip(&sw) {
        let s = fit.logit(row);
        let r = w * (1.0 / (1.0 + (-s).exp()) - label as f64);
        for (g, a) in grad.iter_mut().zip(row) {
            *g += r * a / n;
        }
        grad[5] += r / n;
    }
    for (g, wi) in grad.iter_mut().zip(&fit.weights) {
        *g += wi / n;
    }
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    assert!(norm < 1e-6, "gradient norm {norm}");

    // analytic objective gradient agrees with finite differences away
    // from the optimum
    let params: Vec<f64> = params
        .iter()
        .enumerate()
        .map(|(i, p)| p + 0.3 - 0.1 * i as f64)
        .collect();
    let (_, analytic) = logreg_objective(&params, &x, &y, &sw, 0.7);
    let fd = central_difference(
        |p| logreg_objective(p, &x, &y, &sw, 0.7).0,
        &params,
        0..6,
        1e-5,
    );
    for (i, num) in fd {
        assert!(relative_error(analytic[i], num, 1e-8) < 1e-6);
    }
}

#[test]
fn logreg_restarts_agree() {
    let (x, y) = design(2, 60, 4);
    let n1 = y.iter().filter(|&&v| v == 1).count() as f64;
    let n = y.len() as f64;
    let sw: Vec<f64> = y
        .iter()
        .map(|&v| {
            if v == 1 {
                n / (2.0 * n1)
            } else {
                n / (2.0 * (n - n1))
            }
        })
        .collect();
    let objective = |seed| {
        let fit = train_logreg(&x, &y, 1.0, true, Some(seed)).unwrap();
        let mut p = fit.weights.clone();
        p.push(fit.bias);
        logreg_objective(&p, &x, &y, &sw, 1.0).0
    };
    let a = objective(10);
    for seed in 11..15 {
        assert!((objective(seed) - a).abs() < 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn mlp_gradient_matches_finite_differences(seed in 0u64..1000) {
        let net = Mlp::new(5, &[6, 4]);
        let params = net.init_params(seed);
        let mut r = rng(seed);
        let x = Array2::from_shape_fn((7, 5), |_| r.random_range(-2.0..2.0));
        let y: Vec<u8> = (0..7).map(|i| (i % 2) as u8).collect();
        let loss = |p: &[f64]| {
            let (s, _) = net.forward(p, x.view(), 0.0, None);
            weighted_bce(s.as_slice().unwrap(), &y, 2.5).0
        };
        let (s, cache) = net.forward(&params, x.view(), 0.0, None);
        let (_, dlogits) = weighted_bce(s.as_slice().unwrap(), &y, 2.5);
        let mut grads = vec![0.0; params.len()];
        net.backward(&params, &cache, &dlogits, &mut grads);
        for (i, num) in central_difference(loss, &params, 0..params.len(), 1e-5) {
            prop_assert!(relative_error(grads[i], num, 1e-7) < 1e-4, "param {}: {} vs {}", i, grads[i], num);
        }
    }
}

#[test]
fn mlp_baseline_separates_strong_signal() {
    let data = small_cohort(150, 90, 3.0, 4);
    let (train, val) = encoded_split(&data, 180);
    let config = MlpBaselineConfig {
        epochs: 30,
        seed: 3,
        ..Default::default()
    };
    let out = train_mlp_baseline(&train, &val, &config).unwrap();
    assert!(out.report.roc_auc > 0.95, "auc {}", out.report.roc_auc);

    // logistic regression cross-check on the same split
    let x: Vec<Vec<f64>> = train.iter().map(|b| b.concatenated()).collect();
    let y: Vec<u8> = train.iter().map(|b| b.label).collect();
    let fit = train_logreg(&x, &y, 1.0, true, None).unwrap();
    let xv: Vec<Vec<f64>> = val.iter().map(|b| b.concatenated()).collect();
    let yv: Vec<u8> = val.iter().map(|b| b.label).collect();
    let auc = safn_core::metrics::roc_auc(&fit.predict(&xv), &yv)
        .unwrap()
        .auc;
    assert!(auc > 0.95, "logistic auc {auc}");

    let again = train_mlp_baseline(&train, &val, &config).unwrap();
    assert_eq!(again.epochs, out.epochs);
    assert_eq!(again.params, out.params);
}
