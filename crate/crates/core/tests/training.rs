mod common;

use common::{encoded_split, small_cohort, tiny_config};
use proptest::prelude::*;
use safn_core::baselines::train_logreg;
use safn_core::data::FittedPreprocessor;
use safn_core::model::{Safn, SafnConfig};
use safn_core::objective::LossConfig;
use safn_core::training::{
    apply_ablation, clip_gradients, ema_update, lr_at, run_cv, train_one_fold, AblationSpec,
    CvConfig, OptimConfig,
};

fn quick_optim(epochs: usize, patience: usize) -> OptimConfig {
    OptimConfig {
        lr: 3e-3,
        ema_decay: 0.9,
        epochs,
        patience,
        batch_size: 32,
        seed: 5,
        ..Default::default()
    }
}

fn model_for(train: &[safn_core::data::ModalityBundle], config: SafnConfig) -> Safn {
    Safn::new(config, train[0].widths()).unwrap()
}

#[test]
fn loss_decreases_on_fixed_batch() {
    let data = small_cohort(24, 16, 1.0, 1);
    let (train, val) = encoded_split(&data, 32);
    let model = model_for(&train, tiny_config());
    let optim = OptimConfig {
        lr: 1e-3,
        batch_size: 32,
        epochs: 50,
        patience: 50,
        ..Default::default()
    };
    let out = train_one_fold(&model, &train, &val, &LossConfig::default(), &optim).unwrap();
    assert_eq!(out.steps.len(), 50);
    assert!(out.steps[49].total < out.steps[0].total);
}

#[test]
fn identical_seeds_identical_logs_any_thread_count() {
    let data = small_cohort(60, 30, 1.0, 2);
    let (train, val) = encoded_split(&data, 70);
    let config = SafnConfig {
        dropout: 0.2,
        ..tiny_config()
    };
    let model = model_for(&train, config);
    let optim = quick_optim(4, 4);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| {
            train_one_fold(&model, &train, &val, &LossConfig::default(), &optim).unwrap()
        })
    };
    let a = run(1);
    let b = run(3);
    assert_eq!(a.epochs, b.epochs);
    assert_eq!(a.steps, b.steps);
    assert_eq!(a.params, b.params);
}

#[test]
fn early_stopping_returns_best_epoch() {
    let data = small_cohort(60, 30, 0.5, 3);
    let (train, val) = encoded_split(&data, 70);
    let model = model_for(&train, tiny_config());
    let out = train_one_fold(
        &model,
        &train,
        &val,
        &LossConfig::default(),
        &quick_optim(12, 3),
    )
    .unwrap();
    let max = out
        .epochs
        .iter()
        .map(|e| e.val_composite)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.best_composite, max);
    let first_max = out
        .epochs
        .iter()
        .position(|e| e.val_composite == max)
        .unwrap();
    assert_eq!(out.best_epoch, first_max);
    // the returned parameters reproduce the recorded score
    let preds = safn_core::training::predict(&model, &out.params, &val).unwrap();
    let probs: Vec<f64> = preds.iter().map(|p| p.prob).collect();
    let labels: Vec<u8> = val.iter().map(|b| b.label).collect();
    let c = safn_core::training::composite_metric(&probs, &labels, 0.5).unwrap();
    assert_eq!(c.value, max);
}

#[test]
fn patience_one_stops_at_first_non_improvement() {
    let data = small_cohort(60, 30, 0.3, 4);
    let (train, val) = encoded_split(&data, 70);
    let model = model_for(&train, tiny_config());
    let out = train_one_fold(
        &model,
        &train,
        &val,
        &LossConfig::default(),
        &quick_optim(20, 1),
    )
    .unwrap();
    let mut best = f64::NEG_INFINITY;
    for (i, e) in out.epochs.iter().enumerate() {
        let improved = e.val_composite > best;
        best = best.max(e.val_composite);
        if i + 1 < out.epochs.len() {
            assert!(improved && !e.stopped);
        } else if out.epochs.len() < 20 {
            assert!(!improved && e.stopped);
        }
    }
}

#[test]
fn separable_data_is_learned() {
    let data = small_cohort(150, 90, 3.0, 6);
    let (train, val) = encoded_split(&data, 180);
    let model = model_for(&train, tiny_config());
    let out = train_one_fold(
        &model,
        &train,
        &val,
        &LossConfig::default(),
        &quick_optim(30, 10),
    )
    .unwrap();
    assert!(
        out.best_composite > 0.95,
        "composite {}",
        out.best_composite
    );

    let x: Vec<Vec<f64>> = train.iter().map(|b| b.concatenated()).collect();
    let y: Vec<u8> = train.iter().map(|b| b.label).collect();
    let fit = train_logreg(&x, &y, 1.0, true, None).unwrap();
    let xv: Vec<Vec<f64>> = val.iter().map(|b| b.concatenated()).collect();
    let yv: Vec<u8> = val.iter().map(|b| b.label).collect();
    let c = safn_core::training::composite_metric(&fit.predict(&xv), &yv, 0.5).unwrap();
    assert!(c.value > 0.95, "logistic composite {}", c.value);
}

#[test]
fn gate_ablation_logs_no_sparsity() {
    let data = small_cohort(40, 20, 1.0, 7);
    let (train, val) = encoded_split(&data, 45);
    let spec = AblationSpec {
        disable_gates: true,
        ..Default::default()
    };
    let (cfg, loss) = apply_ablation(&spec, &tiny_config(), &LossConfig::default()).unwrap();
    let model = model_for(&train, cfg);
    let out = train_one_fold(&model, &train, &val, &loss, &quick_optim(2, 2)).unwrap();
    assert!(out.steps.iter().all(|s| s.sparsity == 0.0));
    assert!(out
        .val_predictions
        .iter()
        .all(|p| p.gates.iter().all(|&g| g == 1.0)));
}

#[test]
fn cross_validation_contract() {
    let data = small_cohort(70, 35, 1.5, 8);
    let optim = quick_optim(3, 3);
    let cv = CvConfig {
        k: 3,
        fold_seed: 9,
        jobs: 1,
        ..Default::default()
    };
    let serial = run_cv(
        &data.table,
        &data.schema,
        &tiny_config(),
        &LossConfig::default(),
        &optim,
        None,
        &cv,
    )
    .unwrap();
    let parallel = run_cv(
        &data.table,
        &data.schema,
        &tiny_config(),
        &LossConfig::default(),
        &optim,
        None,
        &CvConfig {
            jobs: 3,
            ..cv.clone()
        },
    )
    .unwrap();
    assert_eq!(serial.aggregate, parallel.aggregate);

    let reports = serial.reports();
    assert_eq!(reports.len(), 3);
    for (i, summary) in serial.aggregate.iter().take(7).enumerate() {
        let mean = reports.iter().map(|r| r.values()[i]).sum::<f64>() / 3.0;
        assert!((summary.mean - mean).abs() < 1e-12);
    }
    for r in &reports {
        assert!(r.values().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!((0.05..=0.95).contains(&r.best_f1_threshold));
    }

    // each fold's preprocessor is fitted on its training rows only
    for fold in &serial.folds {
        let train_rows = serial.plan.training_rows(fold.fold);
        let refit = FittedPreprocessor::fit(&data.table.select(&train_rows), &data.schema).unwrap();
        assert_eq!(fold.checkpoint.preprocessor.as_ref(), Some(&refit));
        let everything = FittedPreprocessor::fit(&data.table, &data.schema).unwrap();
        assert_ne!(fold.checkpoint.preprocessor.as_ref(), Some(&everything));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ema_stays_between(shadow in -5.0f64..5.0, target in -5.0f64..5.0, decay in 0.0f64..=1.0) {
        let mut s = vec![shadow];
        ema_update(&mut s, &[target], decay);
        let (lo, hi) = (shadow.min(target), shadow.max(target));
        prop_assert!(s[0] >= lo - 1e-12 && s[0] <= hi + 1e-12);
    }

    #[test]
    fn clipped_norm_bounded(g in prop::collection::vec(-100.0f64..100.0, 1..40), clip in 0.01f64..10.0) {
        let mut g = g;
        clip_gradients(&mut g, clip).unwrap();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(norm <= clip * (1.0 + 1e-12));
    }

    #[test]
    fn schedule_within_bounds(total in 1usize..500, frac in 0.01f64..0.99) {
        let cfg = OptimConfig { warmup_fraction: frac, ..Default::default() };
        for step in 0..total {
            let lr = lr_at(step, total, &cfg).unwrap();
            prop_assert!((0.0..=cfg.lr).contains(&lr));
        }
        let warmup = safn_core::training::warmup_steps(total, &cfg);
        prop_assert_eq!(lr_at(warmup - 1, total, &cfg).unwrap(), cfg.lr);
        if warmup < total {
            prop_assert!(lr_at(total - 1, total, &cfg).unwrap() < 1e-12);
        }
    }
}
