use grcl_core::domains::{
    augment, generate_sequence, load_dataset, save_dataset, AugmentStrength, DomainSequenceSpec,
    DomainTransform,
};
use grcl_core::metrics::evaluate_accuracy;
use grcl_core::model::ModelSpec;
use grcl_core::trainer::{train_source, TrainConfig};
use ndarray::Array1;
use std::f64::consts::PI;

#[test]
fn noise_statistics_match_sigma() {
    let d = 4;
    let sigma = 0.3;
    let strength = AugmentStrength {
        noise_sigma: sigma,
        scale_min: 1.0,
        scale_max: 1.0,
    };
    let x = Array1::from(vec![0.5, -1.0, 2.0, 0.0]);
    let draws = 10_000;
    let mut sq_norms = 0.0;
    let mut coord = vec![(0.0, 0.0); d];
    for s in 0..draws {
        let e = augment(x.view(), &strength, s) - &x;
        sq_norms += e.dot(&e);
        for (c, v) in coord.iter_mut().zip(e.iter()) {
            c.0 += v;
            c.1 += v * v;
        }
    }
    let rms = (sq_norms / draws as f64).sqrt();
    let expected = sigma * (d as f64).sqrt();
    assert!((rms / expected - 1.0).abs() <= 0.05, "rms {rms} vs {expected}");
    for (sum, sq) in coord {
        let n = draws as f64;
        let sd = ((sq - sum * sum / n) / (n - 1.0)).sqrt();
        assert!((sd / sigma - 1.0).abs() <= 0.05, "coordinate sd {sd}");
    }
}

#[test]
fn scale_draws_stay_in_range() {
    let strength = AugmentStrength {
        noise_sigma: 0.0,
        scale_min: 0.8,
        scale_max: 1.25,
    };
    let x = Array1::from(vec![1.0, 2.0]);
    for s in 0..1000 {
        let y = augment(x.view(), &strength, s);
        let k = y[0];
        assert!((0.8..=1.25).contains(&k));
        assert!((y[1] - 2.0 * k).abs() < 1e-12);
    }
}

fn two_class(rotation: f64) -> DomainSequenceSpec {
    DomainSequenceSpec {
        num_classes: 2,
        input_dim: 2,
        source: DomainTransform::identity(0.1),
        targets: vec![DomainTransform {
            rotation,
            translation: Vec::new(),
            scale: 1.0,
            noise: 0.1,
        }],
        train_per_domain: 200,
        test_per_domain: 200,
        radius: 2.0,
        seed: 21,
    }
}

fn model() -> ModelSpec {
    ModelSpec {
        input_dim: 2,
        hidden_dims: vec![8],
        feature_dim: 4,
        num_classes: 2,
        head_hidden_dim: 4,
        key_dim: 3,
    }
}

#[test]
fn half_turn_swaps_antipodal_classes() {
    let ds = generate_sequence(&two_class(PI)).unwrap();
    let cfg = TrainConfig {
        source_epochs: 50,
        ..TrainConfig::default()
    };
    let p = train_source(&model(), &ds[0], &cfg).unwrap();
    assert!(evaluate_accuracy(&p, ds[0].test()).unwrap() >= 0.99);
    assert!(evaluate_accuracy(&p, ds[1].test()).unwrap() <= 0.01);
}

#[test]
fn identity_transforms_give_equal_accuracy_in_expectation() {
    let mut spec = two_class(0.0);
    spec.source.noise = 1.0;
    spec.targets[0].noise = 1.0;
    spec.test_per_domain = 4000;
    let ds = generate_sequence(&spec).unwrap();
    let cfg = TrainConfig {
        source_epochs: 20,
        ..TrainConfig::default()
    };
    let p = train_source(&model(), &ds[0], &cfg).unwrap();
    let a = evaluate_accuracy(&p, ds[0].test()).unwrap();
    let b = evaluate_accuracy(&p, ds[1].test()).unwrap();
    assert!((a - b).abs() < 0.03, "{a} vs {b}");
}

#[test]
fn seeds_are_reproducible_and_distinct() {
    let a = generate_sequence(&two_class(0.3)).unwrap();
    let b = generate_sequence(&two_class(0.3)).unwrap();
    assert_eq!(a, b);
    let mut other = two_class(0.3);
    other.seed += 1;
    assert_ne!(generate_sequence(&other).unwrap(), a);
}

#[test]
fn files_round_trip_for_every_domain() {
    let dir = tempfile::tempdir().unwrap();
    for ds in generate_sequence(&two_class(1.0)).unwrap() {
        let path = dir.path().join(format!("d{}.csv", ds.domain_id()));
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path, 2).unwrap(), ds);
    }
}

#[test]
fn target_training_labels_are_hidden() {
    let ds = generate_sequence(&two_class(1.0)).unwrap();
    assert!(ds[0].training_labels().is_some());
    assert!(ds[1].training_labels().is_none());
    assert!(ds[1].source_batch().is_err());
}
