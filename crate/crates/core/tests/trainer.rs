mod common;

use common::{gradient_rel_error, random_tensor, random_transform};
use purity_core::headmodel::{verify_preservation, DisentanglementTransform, TransformMode};
use purity_core::protobank::{build_bank, purity, Sign};
use purity_core::synthlab::{generate_in_memory, SynthSpec};
use purity_core::trainer::{total_gradient, total_loss};
use purity_core::{apply_transform, loss_gradient, purity_loss, train, PurityObjective, TrainConfig};
use rand::Rng;

fn small_spec() -> SynthSpec {
    SynthSpec {
        num_classes: 3,
        channels: 5,
        height: 5,
        width: 5,
        samples_per_class: 20,
        ..SynthSpec::default()
    }
}

fn quick_config(mode: TransformMode) -> TrainConfig {
    TrainConfig {
        epochs: 6,
        recalc_every: 2,
        m_start: 20,
        m_end: 5,
        mode,
        ..TrainConfig::default()
    }
}

#[test]
fn analytic_gradient_matches_central_differences() {
    let mut rng = common::rng(20);
    for draw in 0..20 {
        let d = rng.random_range(2..=8);
        let n = rng.random_range(1..=5);
        let items = (0..n)
            .map(|_| {
                let sign = if rng.random_bool(0.25) {
                    Sign::Negative
                } else {
                    Sign::Positive
                };
                (random_tensor(&mut rng, 3, 3, d), rng.random_range(0..d), sign)
            })
            .collect();
        let q = if draw % 2 == 0 { 1.0 } else { 2.0 };
        let objective = PurityObjective::from_parts(items, q).unwrap();
        let mode = if draw % 4 < 2 {
            TransformMode::Orthogonal
        } else {
            TransformMode::Free
        };
        let u = random_transform(&mut rng, mode, d, 0.3);
        let f = |p: &[f64]| {
            purity_loss(
                &objective,
                &DisentanglementTransform::from_params(mode, d, p.to_vec()).unwrap(),
            )
        };
        let err = gradient_rel_error(&loss_gradient(&objective, &u), f, u.params(), 1e-6);
        assert!(err <= 1e-4, "draw {draw}: relative error {err:e}");
    }
}

#[test]
fn free_mode_penalty_gradient_matches_central_differences() {
    let mut rng = common::rng(21);
    let d = 4;
    let items = (0..3)
        .map(|k| (random_tensor(&mut rng, 2, 3, d), k, Sign::Positive))
        .collect();
    let objective = PurityObjective::from_parts(items, 2.0).unwrap();
    let cfg = TrainConfig {
        mode: TransformMode::Free,
        free_mode_penalty: 0.3,
        ..TrainConfig::default()
    };
    let u = random_transform(&mut rng, TransformMode::Free, d, 0.2);
    let f = |p: &[f64]| {
        total_loss(
            &objective,
            &DisentanglementTransform::from_params(TransformMode::Free, d, p.to_vec()).unwrap(),
            &cfg,
        )
    };
    let err = gradient_rel_error(&total_gradient(&objective, &u, &cfg), f, u.params(), 1e-6);
    assert!(err <= 1e-4, "relative error {err:e}");
}

#[test]
fn loss_at_identity_matches_per_record_purity() {
    let data = generate_in_memory(&small_spec()).unwrap();
    let u = DisentanglementTransform::identity(5, TransformMode::Orthogonal);
    let bank = build_bank(&data.store, &u, 4).unwrap();
    for q in [1.0, 2.0] {
        let objective = PurityObjective::from_bank(&bank, &data.store, false, q).unwrap();
        let oracle = 1.0 - bank.positive_records().map(|r| r.purity.powf(q)).sum::<f64>() / objective.len() as f64;
        assert!((purity_loss(&objective, &u) - oracle).abs() <= 1e-12);
    }
}

#[test]
fn objective_recomputes_argmax_under_new_transform() {
    let mut rng = common::rng(22);
    let z = random_tensor(&mut rng, 4, 4, 3);
    let objective = PurityObjective::from_parts(vec![(z.clone(), 1, Sign::Positive)], 1.0).unwrap();
    let u = random_transform(&mut rng, TransformMode::Orthogonal, 3, 0.8);
    let expected = purity(&apply_transform(&u, &z).unwrap(), 1).unwrap();
    assert!((objective.purities(&u)[0] - expected).abs() <= 1e-12);
}

#[test]
fn training_improves_purity_and_preserves_predictions() {
    let data = generate_in_memory(&small_spec()).unwrap();
    for mode in [TransformMode::Orthogonal, TransformMode::Free] {
        let mut seen = Vec::new();
        let out = train(&data.store, &data.head, &quick_config(mode), |e| seen.push(e.epoch)).unwrap();
        assert_eq!(seen, (0..6).collect::<Vec<_>>());
        assert!(out.trace.final_mean_purity > out.trace.initial_mean_purity, "{mode}");
        assert!(out.trace.preservation.holds(1e-6));
        let report = verify_preservation(&data.store, &data.head, &out.transform).unwrap();
        assert_eq!(report.argmax_mismatches, 0);
        assert!(report.max_abs_logit_dev <= 1e-6);
        assert_eq!(out.bank.m, 5);
        assert_eq!(out.bank.epoch_tag, 6);
    }
}

#[test]
fn training_replays_identically() {
    let data = generate_in_memory(&small_spec()).unwrap();
    let cfg = quick_config(TransformMode::Orthogonal);
    let a = train(&data.store, &data.head, &cfg, |_| {}).unwrap();
    let b = train(&data.store, &data.head, &cfg, |_| {}).unwrap();
    assert_eq!(a.transform.params(), b.transform.params());
    assert_eq!(a.trace.without_timing().to_json(), b.trace.without_timing().to_json());
    assert_eq!(a.bank, b.bank);
}

#[test]
fn invalid_config_is_rejected_before_work() {
    let data = generate_in_memory(&small_spec()).unwrap();
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let err = train(&data.store, &data.head, &cfg, |_| {}).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}
