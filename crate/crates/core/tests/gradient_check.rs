//! Analytic gradients against central finite differences.

use grcl_core::contrast::{
    build_feature_bank, contrastive_batch_loss, BankSource, NegativeSampling, SampleKey,
};
use grcl_core::domains::AugmentStrength;
use grcl_core::model::{ce_gradient, Batch, ContrastiveTerms, LossSpec, ModelSpec, ParamVector};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn random_spec(rng: &mut ChaCha8Rng) -> ModelSpec {
    loop {
        let depth = rng.random_range(1..=2);
        let spec = ModelSpec {
            input_dim: rng.random_range(2..=4),
            hidden_dims: (0..depth).map(|_| rng.random_range(3..=8)).collect(),
            feature_dim: rng.random_range(3..=6),
            num_classes: rng.random_range(2..=4),
            head_hidden_dim: rng.random_range(3..=6),
            key_dim: rng.random_range(2..=4),
        };
        if spec.param_count() <= 1000 {
            return spec;
        }
    }
}

/// Dense random parameters. The zero biases of the standard init can put
/// pre-activations exactly on the ReLU kink, where differences are one-sided.
fn random_params(rng: &mut ChaCha8Rng, spec: &ModelSpec) -> ParamVector {
    let values = (0..spec.param_count())
        .map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    ParamVector::from_values(spec, values).unwrap()
}

fn normal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.sample(StandardNormal))
}

/// Perturbs each parameter by +-H and compares with the analytic gradient.
/// Entries whose magnitude is below `floor` are compared absolutely.
fn max_relative_error(
    params: &ParamVector,
    analytic: &[f64],
    loss: impl Fn(&ParamVector) -> f64,
) -> f64 {
    let spec = params.spec().clone();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let mut plus = params.values().to_vec();
        let mut minus = plus.clone();
        plus[i] += H;
        minus[i] -= H;
        let lp = loss(&ParamVector::from_values(&spec, plus).unwrap());
        let lm = loss(&ParamVector::from_values(&spec, minus).unwrap());
        let numeric = (lp - lm) / (2.0 * H);
        let scale = analytic[i].abs().max(numeric.abs()).max(1e-3);
        worst = worst.max((analytic[i] - numeric).abs() / scale);
    }
    worst
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for instance in 0..50 {
        let spec = random_spec(&mut rng);
        let params = random_params(&mut rng, &spec);
        let n = rng.random_range(1..=6);
        let x = normal_matrix(&mut rng, n, spec.input_dim);
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..spec.num_classes)).collect();
        let batch = Batch::new(x, Some(y)).unwrap();
        let (_, g) = ce_gradient(&params, &batch).unwrap();
        let err = max_relative_error(&params, &g, |p| ce_gradient(p, &batch).unwrap().0);
        assert!(err <= TOL, "instance {instance}: relative error {err:e}");
        worst = worst.max(err);
    }
    eprintln!("cross-entropy worst relative error {worst:e}");
}

#[test]
fn contrastive_batch_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let augment = AugmentStrength {
        noise_sigma: 0.2,
        scale_min: 0.8,
        scale_max: 1.2,
    };
    let mut worst: f64 = 0.0;
    for instance in 0..50 {
        let spec = random_spec(&mut rng);
        let params = random_params(&mut rng, &spec);
        let bank_inputs = normal_matrix(&mut rng, 12, spec.input_dim);
        let other = random_params(&mut rng, &spec);
        let bank = build_feature_bank(
            &other,
            &[BankSource::new(0, bank_inputs.view())],
            0.5,
            [0.07, 0.5, 1.0][instance as usize % 3],
        )
        .unwrap();
        let rows: Vec<usize> = (0..rng.random_range(1..=4)).collect();
        let inputs = bank_inputs.select(ndarray::Axis(0), &rows);
        let keys: Vec<SampleKey> = rows.iter().map(|&r| SampleKey::new(0, r as u32)).collect();
        let negatives = if instance % 2 == 0 {
            NegativeSampling::Full
        } else {
            NegativeSampling::Sampled(5)
        };
        let run = |p: &ParamVector| {
            contrastive_batch_loss(p, &bank, inputs.view(), &keys, &augment, negatives, instance)
                .unwrap()
        };
        let step = run(&params);
        let err = max_relative_error(&params, &step.gradient, |p| run(p).loss);
        assert!(err <= TOL, "instance {instance}: relative error {err:e}");
        worst = worst.max(err);
    }
    eprintln!("contrastive worst relative error {worst:e}");
}

#[test]
fn weighted_mixture_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let spec = ModelSpec {
        input_dim: 3,
        hidden_dims: vec![7],
        feature_dim: 5,
        num_classes: 3,
        head_hidden_dim: 6,
        key_dim: 4,
    };
    let params = ParamVector::init(&spec, 9).unwrap();
    let x = normal_matrix(&mut rng, 4, 3);
    let xa = normal_matrix(&mut rng, 4, 3);
    let negs: Vec<Array2<f64>> = (0..4)
        .map(|_| grcl_core::contrast::unit_rows(normal_matrix(&mut rng, 6, 4)))
        .collect();
    let labels = [0usize, 2, 1, 1];
    let spec_of = || {
        LossSpec::Weighted(vec![
            (
                1.0,
                LossSpec::CrossEntropy {
                    inputs: x.view(),
                    labels: &labels,
                },
            ),
            (
                0.3,
                LossSpec::InfoNce(ContrastiveTerms {
                    anchors: x.view(),
                    positives: xa.view(),
                    negatives: &negs,
                    temperature: 0.2,
                }),
            ),
        ])
    };
    let (_, g) = params.loss_gradient(&spec_of()).unwrap();
    let err = max_relative_error(&params, &g, |p| p.loss(&spec_of()).unwrap());
    assert!(err <= TOL, "relative error {err:e}");
}
