use grcl_core::contrast::NegativeSampling;
use grcl_core::domains::{generate_sequence, DomainDataset, DomainSequenceSpec, DomainTransform};
use grcl_core::metrics::evaluate_accuracy;
use grcl_core::model::{ModelSpec, ParamVector};
use grcl_core::trainer::{
    adapt_domain, adapt_domain_traced, initial_params, run_sequence, train_source,
    AdaptationState, Method, StepRecord, TrainConfig,
};
use grcl_core::GrclError;

fn model() -> ModelSpec {
    ModelSpec {
        input_dim: 2,
        hidden_dims: vec![12],
        feature_dim: 6,
        num_classes: 3,
        head_hidden_dim: 6,
        key_dim: 4,
    }
}

fn data(targets: usize) -> Vec<DomainDataset> {
    generate_sequence(&DomainSequenceSpec {
        num_classes: 3,
        input_dim: 2,
        source: DomainTransform::identity(0.15),
        targets: (1..=targets)
            .map(|k| DomainTransform::rotated(25.0 * k as f64, 0.15))
            .collect(),
        train_per_domain: 60,
        test_per_domain: 30,
        radius: 1.0,
        seed: 5,
    })
    .unwrap()
}

fn cfg(method: Method) -> TrainConfig {
    TrainConfig {
        method,
        source_epochs: 40,
        epochs: 3,
        contrast_batch: 16,
        source_batch: 16,
        memory_batch: 16,
        negatives: NegativeSampling::Sampled(32),
        memory_capacity: 20,
        ..TrainConfig::default()
    }
}

#[test]
fn separable_source_is_fit() {
    let ds = data(1);
    let p = train_source(&model(), &ds[0], &cfg(Method::Grcl)).unwrap();
    let train = ds[0].source_batch().unwrap();
    assert!(evaluate_accuracy(&p, &train).unwrap() >= 0.99);
}

#[test]
fn zero_source_epochs_return_the_initialization() {
    let ds = data(1);
    let c = TrainConfig {
        source_epochs: 0,
        ..cfg(Method::Grcl)
    };
    let p = train_source(&model(), &ds[0], &c).unwrap();
    assert_eq!(p, initial_params(&model(), &c).unwrap());
}

#[test]
fn source_training_is_deterministic() {
    let ds = data(1);
    let c = cfg(Method::Grcl);
    assert_eq!(
        train_source(&model(), &ds[0], &c).unwrap(),
        train_source(&model(), &ds[0], &c).unwrap()
    );
}

#[test]
fn source_only_keeps_params_and_grows_memory() {
    let ds = data(2);
    let c = cfg(Method::SourceOnly);
    let p = train_source(&model(), &ds[0], &c).unwrap();
    let mut state = AdaptationState::new(p.clone());
    for (t, target) in ds[1..].iter().enumerate() {
        let (next, report) = adapt_domain(state, &ds[0], target, &c).unwrap();
        assert_eq!(next.params, p);
        assert_eq!(report.steps, 0);
        assert_eq!(report.memory_added, c.memory_capacity.min(target.train_len()));
        assert_eq!(next.memory.total_len(), (t + 1) * 20);
        assert_eq!(next.completed_domains, t + 1);
        state = next;
    }
}

#[test]
fn labeled_target_is_rejected() {
    let ds = data(1);
    let c = cfg(Method::Grcl);
    let p = train_source(&model(), &ds[0], &c).unwrap();
    let err = adapt_domain(AdaptationState::new(p), &ds[0], &ds[0], &c).unwrap_err();
    assert!(matches!(err, GrclError::InvalidInput(_)));
}

#[test]
fn grcl_updates_are_feasible_and_projection_runs() {
    let ds = data(2);
    let c = cfg(Method::Grcl);
    let p = train_source(&model(), &ds[0], &c).unwrap();
    let mut state = AdaptationState::new(p);
    let mut records: Vec<StepRecord> = Vec::new();
    for target in &ds[1..] {
        let mut sink = |r: &StepRecord| records.push(r.clone());
        let (next, _) = adapt_domain_traced(state, &ds[0], target, &c, &mut sink).unwrap();
        state = next;
    }
    assert!(records.iter().any(|r| r.violated.iter().any(|&v| v)));
    // second task carries the memory constraint
    assert!(records.iter().any(|r| r.tags == ["source", "domain-memory"]));
    assert!(records.iter().filter(|r| r.domain == 1).all(|r| r.tags == ["source"]));
    for r in &records {
        assert!(r.multipliers.iter().all(|&u| u >= 0.0));
        if !r.violated.iter().any(|&v| v) {
            assert!(r.multipliers.iter().all(|&u| u == 0.0));
            assert_eq!(r.distortion, 0.0);
        }
    }
}

#[test]
fn exact_variant_uses_one_row_per_memory() {
    let ds = data(3);
    let c = cfg(Method::GrclExact);
    let p = train_source(&model(), &ds[0], &c).unwrap();
    let mut state = AdaptationState::new(p);
    let mut tags = Vec::new();
    for target in &ds[1..] {
        let mut sink = |r: &StepRecord| tags.push((r.domain, r.tags.clone()));
        state = adapt_domain_traced(state, &ds[0], target, &c, &mut sink).unwrap().0;
    }
    let last = tags.iter().rev().find(|(d, _)| *d == 3).unwrap();
    assert_eq!(last.1, ["source", "memory-1", "memory-2"]);
}

/// With a zero classifier weight matrix the source gradient lives only in
/// the classifier, which the contrastive loss never touches, so
/// `<g_t, g_s> = 0` at every step and nothing is ever projected.
#[test]
fn noforget_matches_finetune_when_never_violated() {
    let ds = data(1);
    let spec = model();
    let c = cfg(Method::GrclNoForget);
    let trained = train_source(&spec, &ds[0], &c).unwrap();
    let mut values = trained.values().to_vec();
    let mut offset = 0;
    let mut fan_in = spec.input_dim;
    for &h in spec.hidden_dims.iter().chain([spec.feature_dim].iter()) {
        offset += h * fan_in + h;
        fan_in = h;
    }
    for v in &mut values[offset..offset + spec.num_classes * spec.feature_dim] {
        *v = 0.0;
    }
    let p = ParamVector::from_values(&spec, values).unwrap();

    let run = |m: Method| {
        let c = TrainConfig { method: m, ..c.clone() };
        let mut trace = Vec::new();
        let mut sink = |r: &StepRecord| trace.push((r.contrast_loss, r.violated.clone()));
        let (s, _) = adapt_domain_traced(AdaptationState::new(p.clone()), &ds[0], &ds[1], &c, &mut sink)
            .unwrap();
        (s, trace)
    };
    let (a, ta) = run(Method::GrclNoForget);
    let (b, tb) = run(Method::SeqFinetune);
    assert!(ta.iter().all(|(_, v)| v == &[false]));
    assert_eq!(a.params, b.params);
    assert_eq!(a.memory, b.memory);
    let la: Vec<f64> = ta.iter().map(|t| t.0).collect();
    let lb: Vec<f64> = tb.iter().map(|t| t.0).collect();
    assert_eq!(la, lb);
}

#[test]
fn sequence_matrix_shape_and_determinism() {
    let ds = data(2);
    let c = cfg(Method::Grcl);
    let a = run_sequence(&model(), &ds, &c).unwrap();
    let b = run_sequence(&model(), &ds, &c).unwrap();
    assert_eq!(a.matrix, b.matrix);
    assert!(a.matrix.is_complete());
    for (i, row) in a.matrix.rows().iter().enumerate() {
        assert_eq!(row.len(), i + 1);
        assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn source_only_sequence_of_length_zero() {
    let ds = data(1);
    let out = run_sequence(&model(), &ds[..1], &cfg(Method::Grcl)).unwrap();
    assert_eq!(out.matrix.rows().len(), 1);
    assert_eq!(out.matrix.rows()[0].len(), 1);
}

#[test]
fn identical_domains_with_a_perfect_model_fill_equal_entries() {
    let ds = generate_sequence(&DomainSequenceSpec {
        num_classes: 3,
        input_dim: 2,
        source: DomainTransform::identity(0.0),
        targets: vec![DomainTransform::identity(0.0); 2],
        train_per_domain: 30,
        test_per_domain: 30,
        radius: 1.0,
        seed: 0,
    })
    .unwrap();
    let out = run_sequence(&model(), &ds, &cfg(Method::SourceOnly)).unwrap();
    for row in out.matrix.rows() {
        assert!(row.iter().all(|&v| v == 1.0));
    }
}
