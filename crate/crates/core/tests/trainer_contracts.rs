//! Training-loop invariants: schedules, stopping, checkpoint consistency
//! and determinism across worker counts.

mod common;

use common::{LinearProbe, View};
use heritage_fusion::dataset::{generate_synthetic, AugmentConfig, SplitDataset, SyntheticSpec};
use heritage_fusion::loss::BtConfig;
use heritage_fusion::model::{BaselineKind, ModelSpec};
use heritage_fusion::trainer::{evaluate_split, train_ensemble, train_one, RunOptions, TrainConfig, TrainedModel};

fn small_data(seed: u64) -> SplitDataset {
    generate_synthetic(&SyntheticSpec { n_samples: 120, d_s: 6, d_i: 10, seed, ..SyntheticSpec::default() }).unwrap()
}

fn quick(max_epochs: usize) -> TrainConfig {
    TrainConfig {
        max_epochs,
        lr: 3e-3,
        augment: Some(AugmentConfig { replication: 2, ..AugmentConfig::default() }),
        ..TrainConfig::default()
    }
}

fn check_schedule(run: &TrainedModel, cfg: &TrainConfig) {
    let r = &run.record;
    assert!(r.stopped_epoch <= cfg.max_epochs);
    assert_eq!(r.epochs.len(), r.stopped_epoch);
    assert!(r.stopped_epoch - r.best_epoch <= cfg.early_stop_patience, "{r:?}");
    let best = r.epochs.iter().map(|e| e.val_accuracy).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(r.best_val_accuracy, best);
    assert_eq!(r.epochs[r.best_epoch - 1].val_accuracy, best);
    for w in r.epochs.windows(2) {
        assert!(w[1].lr <= w[0].lr);
    }
    for e in &r.epochs {
        let k = (cfg.lr / e.lr).log(1.0 / cfg.plateau_factor).round() as i32;
        assert!((e.lr - cfg.lr * cfg.plateau_factor.powi(k)).abs() <= 1e-15 * cfg.lr, "lr {} is not lr0 * factor^k", e.lr);
    }
}

#[test]
fn schedule_and_stopping_invariants_hold_across_seeds() {
    let data = small_data(3);
    let cfg = TrainConfig { early_stop_patience: 4, plateau_patience: 2, ..quick(25) };
    let mut reductions = 0;
    for seed in 0..4 {
        let cfg = TrainConfig { seed, ..cfg.clone() };
        for spec in [ModelSpec::default(), ModelSpec::baseline(BaselineKind::Perceiver)] {
            let run = train_one(&spec, &cfg, &data, false).unwrap();
            check_schedule(&run, &cfg);
            reductions += usize::from(run.record.epochs.last().unwrap().lr < cfg.lr);
        }
    }
    assert!(reductions > 0, "no run exercised a plateau reduction");
}

#[test]
fn retained_params_reproduce_best_val_accuracy() {
    let data = small_data(5);
    for spec in [ModelSpec::default(), ModelSpec::baseline(BaselineKind::SensorOnly)] {
        let run = train_one(&spec, &quick(8), &data, false).unwrap();
        let val = run.standardizer.apply_all(&data.val);
        let (_, acc) = evaluate_split(&run.model, &val).unwrap();
        assert_eq!(acc, run.record.best_val_accuracy);
        let restored = TrainedModel::from_checkpoint(&run.checkpoint()).unwrap();
        assert_eq!(evaluate_split(&restored.model, &val).unwrap().1, acc);
    }
}

#[test]
fn loss_decomposition_holds_on_every_logged_step() {
    let data = small_data(7);
    for lambda0 in [0.01, 0.0] {
        let cfg = TrainConfig { record_steps: true, bt: BtConfig { lambda0, ..BtConfig::default() }, ..quick(12) };
        let run = train_one(&ModelSpec::default(), &cfg, &data, false).unwrap();
        assert!(!run.record.steps.is_empty());
        for s in &run.record.steps {
            assert!((s.total - (s.ce + s.lambda * s.bt)).abs() <= 1e-12 * s.total.abs().max(1.0), "{s:?}");
            let expected = lambda0 * 0.98f64.powi(((s.epoch - 1) / 5) as i32);
            assert!((s.lambda - expected).abs() < 1e-15);
            if lambda0 == 0.0 {
                assert_eq!(s.total, s.ce);
            } else {
                assert!(s.bt > 0.0);
            }
        }
    }
}

#[test]
fn ensemble_is_independent_of_worker_count() {
    let data = small_data(9);
    let cfg = quick(3);
    let runs = |jobs| train_ensemble(&ModelSpec::default(), &cfg, &data, 3, RunOptions { jobs: Some(jobs), progress: false }).unwrap();
    let (a, b) = (runs(1), runs(3));
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.record, y.record);
        assert_eq!(x.model, y.model);
    }
    let single = train_ensemble(&ModelSpec::default(), &cfg, &data, 1, RunOptions::default()).unwrap();
    assert_eq!(single.len(), 1);
    assert_eq!(single[0].model, train_one(&ModelSpec::default(), &cfg, &data, false).unwrap().model);
}

#[test]
fn fits_separable_training_data() {
    let data = generate_synthetic(&SyntheticSpec { n_samples: 700, split: [5.0, 1.0, 1.0], ..SyntheticSpec::default() }).unwrap();
    assert_eq!(data.train.len(), 500);
    let oracle = LinearProbe::fit(&data.train, View::Fused, 5).accuracy(&data.train);
    assert!(oracle >= 0.95, "logistic regression reaches only {oracle}");
    let cfg = TrainConfig { augment: None, ..TrainConfig::default() };
    let run = train_one(&ModelSpec::default(), &cfg, &data, false).unwrap();
    let (_, acc) = evaluate_split(&run.model, &run.standardizer.apply_all(&data.train)).unwrap();
    eprintln!("oracle {oracle:.3} model {acc:.3}");
    assert!(acc >= 0.95, "train accuracy {acc}");
}

#[test]
fn invalid_configs_are_rejected() {
    let data = small_data(1);
    for cfg in [
        TrainConfig { lr: 0.0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { early_stop_patience: 0, ..TrainConfig::default() },
        TrainConfig { plateau_factor: 1.5, ..TrainConfig::default() },
    ] {
        assert!(train_one(&ModelSpec::default(), &cfg, &data, false).is_err());
    }
    assert!(train_ensemble(&ModelSpec::default(), &quick(1), &data, 0, RunOptions::default()).is_err());
}
