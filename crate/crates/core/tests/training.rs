use mstgcn::data::{generate_synthetic, synthetic_layout, Dataset, SyntheticSpec};
use mstgcn::domain::GrlConfig;
use mstgcn::features::FeatureNetConfig;
use mstgcn::graph::AdjacencyKind;
use mstgcn::params::OptimizerKind;
use mstgcn::stgcn::{FcSource, ModelConfig};
use mstgcn::train::*;

fn dataset(subjects: usize, epochs: usize, seed: u64) -> Dataset {
    let spec = SyntheticSpec {
        subjects,
        epochs_per_subject: epochs,
        channels: 3,
        samples: 300,
        noise_sigma: 0.3,
        seed,
        ..SyntheticSpec::default()
    };
    generate_synthetic(&spec).unwrap().1
}

fn config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            features: FeatureNetConfig::shortened(),
            context: 1,
            cheb_k: 2,
            cheb_filters: 6,
            time_filters: 6,
            ..ModelConfig::default()
        },
        epochs,
        batch_size: 16,
        seed,
        learning_rate: 3e-3,
        grl: GrlConfig { beta: 0.1, warmup_epochs: 2 },
        ..TrainConfig::default()
    }
}

#[test]
fn two_epochs_give_two_history_entries() {
    let ds = dataset(2, 25, 1);
    let t = train(&ds, &synthetic_layout(3), &[0, 1], &[], &config(2, 3)).unwrap();
    assert_eq!(t.history.len(), 2);
    assert_eq!(t.history[0].beta, 0.0);
    assert_eq!(t.history[1].beta, 0.05);
    for h in &t.history {
        assert!(h.total.is_finite() && h.class_ce > 0.0 && h.domain_ce > 0.0);
        assert!((h.total - (h.class_ce + h.domain_ce + 1e-4 * h.graph)).abs() < 1e-9);
    }
}

#[test]
fn identical_seeds_give_identical_parameters() {
    let ds = dataset(2, 30, 2);
    let cfg = config(2, 9);
    let a = train(&ds, &synthetic_layout(3), &[0, 1], &[], &cfg).unwrap();
    let b = train(&ds, &synthetic_layout(3), &[0, 1], &[], &cfg).unwrap();
    assert_eq!(a.history, b.history);
    for id in a.store.ids() {
        let bits = |s: &mstgcn::params::ParamStore| s.value(id).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.store), bits(&b.store), "{}", a.store.name(id));
    }
    let c = train(&ds, &synthetic_layout(3), &[0, 1], &[], &config(2, 10)).unwrap();
    assert_ne!(a.history, c.history);
}

#[test]
fn separable_data_improves_training_accuracy() {
    let ds = dataset(3, 40, 4);
    let cfg = TrainConfig { learning_rate: 1e-2, ..config(12, 5) };
    let t = train(&ds, &synthetic_layout(3), &[0, 1, 2], &[], &cfg).unwrap();
    let first = t.history.first().unwrap().train_accuracy;
    let last = t.history.last().unwrap().train_accuracy;
    assert!(last > first, "{first} -> {last}");
    assert!(last > 0.5, "final train accuracy {last}");
}

#[test]
fn only_training_subjects_reach_the_gradient() {
    let ds = dataset(3, 20, 6);
    let t = train(&ds, &synthetic_layout(3), &[0, 2], &[1], &config(2, 1)).unwrap();
    assert_eq!(t.gradient_subjects.into_iter().collect::<Vec<_>>(), vec![0, 2]);
    assert_eq!(t.domain_subjects, vec![0, 2]);
}

#[test]
fn validation_enables_early_stopping() {
    let ds = dataset(3, 20, 7);
    let cfg = TrainConfig { patience: 1, learning_rate: 0.5, optimizer: OptimizerKind::Sgd, ..config(6, 2) };
    let t = train(&ds, &synthetic_layout(3), &[0, 1], &[2], &cfg).unwrap();
    assert!(t.history.iter().all(|h| h.val_loss.is_some()));
    let vals: Vec<f64> = t.history.iter().map(|h| h.val_loss.unwrap()).collect();
    if t.history.len() < 6 {
        // stopped: the last epoch did not improve on the best one
        let best = vals[..vals.len() - 1].iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(*vals.last().unwrap() >= best);
    }
}

#[test]
fn bad_inputs_are_rejected() {
    let ds = dataset(2, 10, 8);
    let layout = synthetic_layout(3);
    let empty = Dataset { records: vec![], ..ds.clone() };
    assert!(matches!(train(&empty, &layout, &[0], &[], &config(1, 0)), Err(TrainError::Data(_))));

    let mut one_class = ds.clone();
    one_class.records.iter_mut().for_each(|r| r.label = 2);
    assert!(matches!(train(&one_class, &layout, &[0, 1], &[], &config(1, 0)), Err(TrainError::Data(_))));

    assert!(matches!(train(&ds, &layout, &[0], &[0], &config(1, 0)), Err(TrainError::Data(_))));
    let bad = TrainConfig { learning_rate: -1.0, ..config(1, 0) };
    assert!(matches!(train(&ds, &layout, &[0, 1], &[], &bad), Err(TrainError::Config(_))));
}

#[test]
fn runaway_learning_rate_reports_divergence() {
    let ds = dataset(2, 20, 9);
    let cfg = TrainConfig { learning_rate: 1e300, optimizer: OptimizerKind::Sgd, ..config(5, 0) };
    match train(&ds, &synthetic_layout(3), &[0, 1], &[], &cfg) {
        Err(TrainError::Divergence { last_good, .. }) => {
            assert!(!last_good.is_empty());
        }
        other => panic!("expected divergence, got {:?}", other.map(|t| t.history)),
    }
}

#[test]
fn leave_one_subject_out_tests_each_subject_once() {
    let subjects: Vec<u32> = (0..10).collect();
    let splits = fold_splits(&subjects, 10, 3).unwrap();
    assert_eq!(splits.len(), 10);
    let mut tested: Vec<u32> = splits.iter().flat_map(|s| s.test.clone()).collect();
    assert!(splits.iter().all(|s| s.test.len() == 1 && s.train.len() == 9));
    tested.sort_unstable();
    assert_eq!(tested, subjects);
}

#[test]
fn cross_validation_keeps_test_subjects_out_and_ignores_job_count() {
    let ds = dataset(3, 20, 10);
    let cfg = config(1, 4);
    let a = cross_validate(&ds, &synthetic_layout(3), 3, &cfg, 1).unwrap();
    let b = cross_validate(&ds, &synthetic_layout(3), 3, &cfg, 2).unwrap();
    assert_eq!(a.folds.len(), 3);
    for (fa, fb) in a.folds.iter().zip(&b.folds) {
        assert!(fa.split.test.iter().all(|s| !fa.trained.gradient_subjects.contains(s)));
        assert_eq!(fa.trained.history, fb.trained.history);
        assert_eq!(fa.metrics, fb.metrics);
    }
    assert_eq!(a.pooled.confusion.total(), 60);
    let mean = a.folds.iter().map(|f| f.metrics.accuracy).sum::<f64>() / 3.0;
    assert!((a.accuracy.0 - mean).abs() < 1e-12);
}

#[test]
fn fixed_adjacency_modes_train_end_to_end() {
    let ds = dataset(2, 12, 11);
    for kind in [AdjacencyKind::Full, AdjacencyKind::Knn, AdjacencyKind::Pcc, AdjacencyKind::Plv, AdjacencyKind::Mi] {
        let mut cfg = config(1, 0);
        cfg.model.fc_source = FcSource::Fixed(kind);
        let t = train(&ds, &synthetic_layout(3), &[0, 1], &[], &cfg).unwrap();
        assert_eq!(t.history[0].graph, 0.0, "{kind:?}");
        let preds = predict(&t, &ds, &[0], 8).unwrap();
        assert!(preds.iter().all(|p| p.fc_adjacency.is_none()));
    }
}

#[test]
fn predictions_carry_attention_and_adjacency() {
    let ds = dataset(2, 12, 12);
    let t = train(&ds, &synthetic_layout(3), &[0], &[], &config(1, 0)).unwrap();
    let preds = predict(&t, &ds, &[1], 5).unwrap();
    assert_eq!(preds.len(), 12);
    for p in &preds {
        assert_eq!(p.temporal_attention.len(), 9);
        for row in p.temporal_attention.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let a = p.fc_adjacency.as_ref().unwrap();
        for row in a.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert_eq!(p.fused.len(), 12);
        assert_eq!(ds.records[p.record].label as usize, p.label);
    }
    let m = evaluate(&t, &ds, &[1], 5).unwrap();
    assert_eq!(m.confusion.total(), 12);
}
