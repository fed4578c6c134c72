mod common;

use common::{bus, generator, lossy_triangle};
use opflab::fixtures;
use opflab::network::NetworkCase;
use opflab::pipeline::{build_dataset, sample_loads, Sample};
use opflab::labeler::SolverConfig;
use opflab::surrogate::{self, Activation, Batch, SampleViolations};
use opflab::training::{
    evaluate_epoch, train, update_multipliers, write_history_csv, LossKind, Optimizer, TrainConfig, TrainError,
    TrainState, Trainer,
};
use proptest::prelude::*;

fn unlabeled(case: &NetworkCase, count: usize, seed: u64) -> Vec<Sample> {
    sample_loads(case, count, 0.2, seed)
        .unwrap()
        .iter()
        .map(Sample::unlabeled)
        .collect()
}

fn small_config(kind: LossKind) -> TrainConfig {
    TrainConfig {
        loss_kind: kind,
        hidden: vec![8, 8],
        epochs: 20,
        ..TrainConfig::default()
    }
}

fn labeled_triangle(count: usize) -> Vec<Sample> {
    let case = lossy_triangle();
    build_dataset(&case, count, 0.1, 3, &SolverConfig::default()).unwrap().samples
}

fn full_batch<'a>(trainer: &'a Trainer, samples: &'a [Sample], kind: LossKind) -> Batch<'a> {
    Batch {
        inputs: samples.iter().map(|s| s.features.as_slice()).collect(),
        labels: (kind == LossKind::Mse).then(|| samples.iter().map(|s| s.label.as_deref().unwrap()).collect()),
        multipliers: (0..samples.len()).map(|i| trainer.state().multipliers(i)).collect(),
    }
}

#[test]
fn zero_alpha_freezes_weights_but_not_multipliers() {
    let case = lossy_triangle();
    let samples = unlabeled(&case, 10, 1);
    let config = TrainConfig {
        alpha: 0.0,
        rho: 0.5,
        ..small_config(LossKind::Decision)
    };
    let trainer = Trainer::new(&case, &samples, config.clone()).unwrap();
    let initial = trainer.model().clone();
    let (model, state) = train(&case, &samples, &config).unwrap();
    assert_eq!(model.parameters(), initial.parameters());
    let total: f64 = state.mu_p.iter().flatten().chain(state.mu_q.iter().flatten()).sum();
    assert!(total > 0.0, "multipliers did not move");
}

#[test]
fn training_is_deterministic() {
    let samples = labeled_triangle(12);
    let case = lossy_triangle();
    for kind in [LossKind::Decision, LossKind::Mse] {
        for batch_size in [0, 5] {
            let config = TrainConfig {
                batch_size,
                ..small_config(kind)
            };
            let a = train(&case, &samples, &config).unwrap();
            let b = train(&case, &samples, &config).unwrap();
            assert_eq!(a, b);
        }
    }
}

#[test]
fn minibatch_order_depends_on_seed() {
    let samples = labeled_triangle(12);
    let case = lossy_triangle();
    let config = TrainConfig {
        batch_size: 4,
        ..small_config(LossKind::Mse)
    };
    let a = Trainer::new(&case, &samples, config.clone()).unwrap();
    let mut b = Trainer::with_model(&case, &samples, TrainConfig { seed: 9, ..config }, a.model().clone()).unwrap();
    let mut a = a;
    a.step_epoch().unwrap();
    b.step_epoch().unwrap();
    assert_ne!(a.model().parameters(), b.model().parameters());
}

#[test]
fn decision_loss_descends_on_three_bus() {
    let case = lossy_triangle();
    let samples = unlabeled(&case, 50, 5);
    let config = TrainConfig {
        epochs: 200,
        ..TrainConfig::default()
    };
    let (_, state) = train(&case, &samples, &config).unwrap();
    let h = &state.history;
    assert_eq!(h.len(), 200);
    let first: f64 = h[..10].iter().map(|r| r.total).sum::<f64>() / 10.0;
    let last: f64 = h[190..].iter().map(|r| r.total).sum::<f64>() / 10.0;
    assert!(last < first, "first {first}, last {last}");
}

#[test]
fn multiplier_update_examples() {
    let mut state = TrainState::new(1, 1, 1, 0.0);
    let v = [SampleViolations {
        sigma_f: vec![0.5],
        sigma_p: vec![0.0],
        sigma_q: vec![0.0],
    }];
    update_multipliers(&mut state, &v, 0.1).unwrap();
    assert_eq!(state.lambda[0][0], 0.05);

    let before = state.clone();
    let zero = [SampleViolations {
        sigma_f: vec![0.0],
        sigma_p: vec![0.0],
        sigma_q: vec![0.0],
    }];
    update_multipliers(&mut state, &zero, 0.1).unwrap();
    assert_eq!(state, before);

    let mut state = TrainState::new(1, 1, 1, 0.0);
    let v = [SampleViolations {
        sigma_f: vec![0.25],
        sigma_p: vec![0.5],
        sigma_q: vec![2.0],
    }];
    update_multipliers(&mut state, &v, 0.5).unwrap();
    update_multipliers(&mut state, &v, 0.5).unwrap();
    assert_eq!(state.lambda[0][0], 2.0 * 0.5 * 0.25);
    assert_eq!(state.mu_p[0][0], 2.0 * 0.5 * 0.5);
    assert_eq!(state.mu_q[0][0], 2.0 * 0.5 * 2.0);
}

#[test]
fn multiplier_update_rejects_bad_shapes_and_rho() {
    let mut state = TrainState::new(2, 1, 1, 0.0);
    let one = SampleViolations {
        sigma_f: vec![0.0],
        sigma_p: vec![0.0],
        sigma_q: vec![0.0],
    };
    assert!(matches!(
        update_multipliers(&mut state, &[one.clone()], 1.0),
        Err(TrainError::Shape { .. })
    ));
    let wide = SampleViolations {
        sigma_f: vec![0.0, 0.0],
        ..one.clone()
    };
    assert!(matches!(
        update_multipliers(&mut state, &[one.clone(), wide], 1.0),
        Err(TrainError::Shape { .. })
    ));
    assert!(matches!(
        update_multipliers(&mut state, &[one.clone(), one], -1.0),
        Err(TrainError::Config(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn multipliers_never_decrease(seed in 0u64..1000, rho in 0.0f64..5.0) {
        let case = lossy_triangle();
        let samples = unlabeled(&case, 6, seed);
        let config = TrainConfig { rho, seed, hidden: vec![6], ..TrainConfig::default() };
        let mut trainer = Trainer::new(&case, &samples, config).unwrap();
        let mut prev = trainer.state().clone();
        for _ in 0..8 {
            trainer.step_epoch().unwrap();
            let now = trainer.state();
            for (a, b) in [(&prev.lambda, &now.lambda), (&prev.mu_p, &now.mu_p), (&prev.mu_q, &now.mu_q)] {
                for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
                    prop_assert!(y >= x);
                }
            }
            prev = now.clone();
        }
    }
}

#[test]
fn mse_with_frozen_zero_multipliers_is_plain_descent() {
    let case = lossy_triangle();
    let samples = labeled_triangle(10);
    let config = TrainConfig {
        rho: 0.0,
        alpha: 1e-2,
        optimizer: Optimizer::Sgd,
        ..small_config(LossKind::Mse)
    };
    let mut trainer = Trainer::new(&case, &samples, config.clone()).unwrap();
    let mut expected = trainer.model().clone();
    let inputs: Vec<Vec<f64>> = samples.iter().map(|s| s.features.clone()).collect();
    let labels: Vec<Vec<f64>> = samples.iter().map(|s| s.label.clone().unwrap()).collect();
    for _ in 0..5 {
        let record = trainer.step_epoch().unwrap();
        assert_eq!(record.ineq_penalty + record.eq_penalty_p + record.eq_penalty_q, 0.0);
        let grad = mse_gradient(&expected, &inputs, &labels, &case);
        let next: Vec<f64> = expected.parameters().iter().zip(&grad).map(|(w, g)| w - 1e-2 * g).collect();
        expected.set_parameters(&next).unwrap();
        assert_eq!(trainer.model().parameters(), expected.parameters());
    }
    assert!(trainer.state().lambda.iter().flatten().all(|&l| l == 0.0));
}

/// Gradient of the mean squared error alone, with no constraint terms.
fn mse_gradient(
    model: &surrogate::SurrogateModel,
    inputs: &[Vec<f64>],
    labels: &[Vec<f64>],
    case: &NetworkCase,
) -> Vec<f64> {
    let zeros_f = vec![0.0; case.branch_count()];
    let zeros_n = vec![0.0; case.bus_count()];
    let batch = Batch {
        inputs: inputs.iter().map(Vec::as_slice).collect(),
        labels: Some(labels.iter().map(Vec::as_slice).collect()),
        multipliers: inputs
            .iter()
            .map(|_| surrogate::MultiplierRows {
                lambda: &zeros_f,
                mu_p: &zeros_n,
                mu_q: &zeros_n,
            })
            .collect(),
    };
    surrogate::grad_weights(model, &batch, case, surrogate::BaseLoss::Mse(surrogate::LabelLayout::Full)).unwrap()
}

fn one_bus_case() -> NetworkCase {
    NetworkCase::new(
        100.0,
        vec![bus(1, true, (0.95, 1.05), (0.7, 0.1))],
        vec![],
        vec![generator(1, (0.2, 1.4), (-0.5, 0.5), 3.0, 2.0)],
    )
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[test]
fn one_step_matches_hand_computed_update() {
    let case = one_bus_case();
    let samples = vec![Sample::unlabeled(&opflab::powerflow::Loads {
        p: vec![0.7],
        q: vec![0.1],
    })];
    let alpha = 0.3;
    let config = TrainConfig {
        hidden: vec![1],
        activation: Activation::Relu,
        alpha,
        rho: 0.0,
        epochs: 1,
        normalize_inputs: false,
        optimizer: Optimizer::Sgd,
        ..TrainConfig::default()
    };
    // Layout: W1 (1×2), b1, W2 (4×1), b2 (4). The hidden unit is active.
    let mut w = vec![0.8, -0.4, 0.1, 0.6, -0.3, 0.2, 0.5, 0.05, -0.1, 0.3, 0.0];
    let mut model = Trainer::new(&case, &samples, config.clone()).unwrap().model().clone();
    model.set_parameters(&w).unwrap();
    let mut trainer = Trainer::with_model(&case, &samples, config, model).unwrap();
    trainer.step_epoch().unwrap();

    let (pd, qd) = (0.7, 0.1);
    let z1 = w[0] * pd + w[1] * qd + w[2];
    assert!(z1 > 0.0);
    let h = z1;
    let s = sigmoid(w[3] * h + w[7]);
    let p = 0.2 + 1.2 * s;
    let dl_dp = 2.0 * 3.0 * p + 2.0;
    let head = dl_dp * 1.2 * s * (1.0 - s);
    let mut grad = vec![0.0; 11];
    grad[0] = head * w[3] * pd;
    grad[1] = head * w[3] * qd;
    grad[2] = head * w[3];
    grad[3] = head * h;
    grad[7] = head;
    for (wk, gk) in w.iter_mut().zip(&grad) {
        *wk -= alpha * gk;
    }
    for (k, (a, b)) in trainer.model().parameters().iter().zip(&w).enumerate() {
        assert!((a - b).abs() < 1e-12, "weight {k}: {a} vs {b}");
    }
}

#[test]
fn history_totals_match_recomputed_loss() {
    let case = lossy_triangle();
    let samples = labeled_triangle(8);
    for kind in [LossKind::Decision, LossKind::Mse] {
        let config = TrainConfig {
            rho: 0.7,
            ..small_config(kind)
        };
        let mut trainer = Trainer::new(&case, &samples, config.clone()).unwrap();
        for e in 0..6 {
            let expected = surrogate::lagrangian_loss(
                trainer.model(),
                &full_batch(&trainer, &samples, kind),
                &case,
                config.base_loss(),
            )
            .unwrap();
            let record = trainer.step_epoch().unwrap();
            assert_eq!(record.epoch, e);
            assert_eq!(record.loss(), expected);
        }
        let (_, state) = train(&case, &samples, &TrainConfig { epochs: 6, ..config }).unwrap();
        assert_eq!(state.history, trainer.state().history);
        assert_eq!(state.epoch, 6);
    }
}

#[test]
fn history_csv_has_one_row_per_epoch() {
    let case = lossy_triangle();
    let samples = unlabeled(&case, 4, 2);
    let (_, state) = train(&case, &samples, &small_config(LossKind::Decision)).unwrap();
    let mut out = Vec::new();
    write_history_csv(&state.history, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("epoch,objective_term,"));
    assert_eq!(lines.count(), 20);
}

#[test]
fn train_errors() {
    let case = lossy_triangle();
    let unl = unlabeled(&case, 3, 0);
    assert!(matches!(
        train(&case, &[], &small_config(LossKind::Decision)),
        Err(TrainError::EmptyDataset)
    ));
    assert!(matches!(
        train(&case, &unl, &small_config(LossKind::Mse)),
        Err(TrainError::MissingLabel(0))
    ));
    let short = vec![Sample::unlabeled(&opflab::powerflow::Loads {
        p: vec![0.1],
        q: vec![0.1],
    })];
    assert!(matches!(
        train(&case, &short, &small_config(LossKind::Decision)),
        Err(TrainError::FeatureDimension { expected: 6, actual: 2, .. })
    ));
    for bad in [
        TrainConfig { alpha: -1.0, ..small_config(LossKind::Decision) },
        TrainConfig { rho: f64::NAN, ..small_config(LossKind::Decision) },
        TrainConfig { epochs: 0, ..small_config(LossKind::Decision) },
    ] {
        assert!(matches!(train(&case, &unl, &bad), Err(TrainError::Config(_))));
    }
}

#[test]
fn divergence_names_the_epoch() {
    let case = lossy_triangle();
    let samples = unlabeled(&case, 4, 0);
    let config = TrainConfig {
        rho: 1e13,
        ..small_config(LossKind::Decision)
    };
    match train(&case, &samples, &config) {
        Err(TrainError::Diverged { epoch, total }) => {
            assert_eq!(epoch, 1);
            assert!(total > 1e12);
            let message = TrainError::Diverged { epoch, total }.to_string();
            assert!(message.contains("epoch 1"), "{message}");
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn config_round_trips_through_json() {
    let config = TrainConfig {
        loss_kind: LossKind::Mse,
        optimizer: Optimizer::Adam,
        hidden: vec![3, 4],
        ..TrainConfig::default()
    };
    let text = serde_json::to_string(&config).unwrap();
    assert_eq!(serde_json::from_str::<TrainConfig>(&text).unwrap(), config);
    let partial: TrainConfig = serde_json::from_str(r#"{"epochs": 7}"#).unwrap();
    assert_eq!(partial.epochs, 7);
    assert_eq!(partial.alpha, TrainConfig::default().alpha);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 7}"#).is_err());
    assert_eq!("mse".parse::<LossKind>().unwrap(), LossKind::Mse);
    assert_eq!("adam".parse::<Optimizer>().unwrap(), Optimizer::Adam);
    assert!("huber".parse::<LossKind>().is_err());
}

#[test]
fn memorized_labels_give_zero_regret() {
    let case = fixtures::two_bus_case();
    let data = build_dataset(&case, 1, 0.0, 0, &SolverConfig::default()).unwrap();
    let sample = &data.samples[0];
    let label = sample.label.as_deref().unwrap();
    let mut model = surrogate::init_model(&case, &[2], 0).unwrap();
    let (lower, upper) = model.bound_tables();
    let bias: Vec<f64> = label
        .iter()
        .zip(lower.iter().zip(upper))
        .map(|(y, (lo, hi))| {
            let s = ((y - lo) / (hi - lo)).clamp(1e-15, 1.0 - 1e-15);
            (s / (1.0 - s)).ln()
        })
        .collect();
    let mut params = vec![0.0; model.parameters().len()];
    let at = params.len() - bias.len();
    params[at..].copy_from_slice(&bias);
    model.set_parameters(&params).unwrap();
    let summary = evaluate_epoch(&case, &model, &data.samples).unwrap();
    assert!(summary.mean_regret.abs() < 1e-6, "{summary:?}");
    assert!(summary.max_sigma_p < 1e-5 && summary.max_sigma_q < 1e-5, "{summary:?}");
}

#[test]
fn evaluate_epoch_errors_and_bound_excess() {
    let case = lossy_triangle();
    let model = surrogate::init_model(&case, &[8], 4).unwrap();
    assert!(matches!(evaluate_epoch(&case, &model, &[]), Err(TrainError::EmptyDataset)));
    let unl = unlabeled(&case, 2, 0);
    assert!(matches!(evaluate_epoch(&case, &model, &unl), Err(TrainError::MissingLabel(0))));

    let samples = labeled_triangle(10);
    let summary = evaluate_epoch(&case, &model, &samples).unwrap();
    assert_eq!(summary.samples, samples.len());
    assert_eq!(summary.max_v_excess, 0.0);
    assert_eq!(summary.max_gen_excess, 0.0);
    assert!(summary.max_sigma_p > 0.0);
}
