//! End-to-end training checks against synthetic ground truth: single-basis
//! recovery, over-parameterized fits, adaptation data efficiency, and weight
//! alignment improving with data.

use apa_core::lab::{
    best_permutation_tv, generate_ground_truth, recovery_experiment, simulate_comparisons,
    CohortSpec, GroundTruthConfig, RecoveryConfig, WeightDistribution,
};
use apa_core::optim::{fit_weights, train_joint, TrainConfig};
use apa_core::reward::preference_accuracy;

#[test]
fn single_basis_recovery_matches_generator_accuracy() {
    // With K = 1 every annotator shares one head, so training reduces to a
    // plain Bradley-Terry fit; the generator itself is the oracle.
    let cfg = RecoveryConfig {
        k_true: 1,
        d: 8,
        items: 100,
        n_annotators: 5,
        per_annotator: 200,
        seed: 42,
        accuracy_margin: 0.02,
        weights: WeightDistribution::Dirichlet { alpha: vec![1.0] },
        train: TrainConfig {
            k: 1,
            ..TrainConfig::default()
        },
        ..RecoveryConfig::default()
    };
    let report = recovery_experiment(&cfg).unwrap();
    assert!(
        report.meets_margin,
        "fitted {:.4} vs generator {:.4}",
        report.fitted_holdout_accuracy, report.truth_holdout_accuracy
    );
}

#[test]
fn overparameterized_fit_is_not_meaningfully_worse() {
    let base = RecoveryConfig {
        k_true: 2,
        d: 8,
        items: 120,
        n_annotators: 20,
        per_annotator: 150,
        seed: 7,
        weights: WeightDistribution::Dirichlet { alpha: vec![0.4] },
        train: TrainConfig {
            k: 2,
            max_epochs: 300,
            ..TrainConfig::default()
        },
        ..RecoveryConfig::default()
    };
    let exact = recovery_experiment(&base).unwrap();
    let over = recovery_experiment(&RecoveryConfig {
        train: TrainConfig {
            k: 4,
            max_epochs: 300,
            ..TrainConfig::default()
        },
        ..base
    })
    .unwrap();
    assert!(
        over.fitted_holdout_accuracy >= exact.fitted_holdout_accuracy - 0.01,
        "K=4 over true 2 scored {:.4}, K=2 scored {:.4}",
        over.fitted_holdout_accuracy,
        exact.fitted_holdout_accuracy
    );
}

#[test]
fn weight_alignment_tightens_with_more_comparisons() {
    let run = |per_annotator: usize| {
        let cfg = RecoveryConfig {
            k_true: 2,
            d: 8,
            items: 100,
            n_annotators: 10,
            per_annotator,
            seed: 11,
            weights: WeightDistribution::Dirichlet { alpha: vec![0.5] },
            train: TrainConfig {
                k: 2,
                max_epochs: 400,
                ..TrainConfig::default()
            },
            ..RecoveryConfig::default()
        };
        recovery_experiment(&cfg)
            .unwrap()
            .weight_alignment_tv
            .expect("matching K")
    };
    let coarse = run(50);
    let fine = run(500);
    assert!(
        fine <= coarse,
        "mean TV should shrink with data: 50 cmp -> {coarse:.4}, 500 cmp -> {fine:.4}"
    );
}

#[test]
fn adaptation_over_frozen_truth_bases_tracks_dense_fit() {
    // Ten fresh annotators, weights fitted over the generating bases with a
    // 30-comparison budget, scored against a 500-comparison fit on a shared
    // holdout.
    let truth_cfg = GroundTruthConfig {
        k: 4,
        d: 8,
        items: 150,
        seed: 31,
        cohorts: vec![CohortSpec {
            cohort_id: "wave1".into(),
            size: 10,
            weights: WeightDistribution::Dirichlet { alpha: vec![0.3] },
        }],
    };
    let truth: apa_core::lab::GroundTruth = generate_ground_truth(&truth_cfg).unwrap();
    let dense = simulate_comparisons(&truth, 500, 1.0, 32).unwrap();
    let sparse = simulate_comparisons(&truth, 30, 1.0, 33).unwrap();
    let holdout = simulate_comparisons(&truth, 200, 1.0, 34).unwrap();

    let cfg = TrainConfig {
        k: 4,
        ..TrainConfig::default()
    };
    let before = serde_json::to_vec(&truth.basis_true).unwrap();
    let (w_dense, _) = fit_weights(&truth.basis_true, &dense, &truth.catalog, &cfg).unwrap();
    let (w_sparse, _) = fit_weights(&truth.basis_true, &sparse, &truth.catalog, &cfg).unwrap();
    assert_eq!(
        serde_json::to_vec(&truth.basis_true).unwrap(),
        before,
        "fitting weights must not touch the basis"
    );

    let acc_dense =
        preference_accuracy(&truth.basis_true, &w_dense, &holdout, &truth.catalog).unwrap();
    let acc_sparse =
        preference_accuracy(&truth.basis_true, &w_sparse, &holdout, &truth.catalog).unwrap();
    assert!(
        acc_sparse >= acc_dense - 0.05,
        "30-comparison fit {acc_sparse:.4} vs 500-comparison fit {acc_dense:.4}"
    );
}

#[test]
fn joint_training_then_weight_alignment_is_reasonable() {
    // Stage 1 on a diverse cohort, then check the fitted weights align with
    // the generator's after the best head permutation.
    let cfg = RecoveryConfig {
        k_true: 3,
        d: 8,
        items: 120,
        n_annotators: 15,
        per_annotator: 200,
        seed: 19,
        weights: WeightDistribution::OneHotMixture {
            p: vec![0.4, 0.3, 0.3],
        },
        train: TrainConfig {
            k: 3,
            max_epochs: 400,
            ..TrainConfig::default()
        },
        ..RecoveryConfig::default()
    };
    let report = recovery_experiment(&cfg).unwrap();
    let tv = report.weight_alignment_tv.unwrap();
    assert!(
        tv < 0.5,
        "one-hot annotators should be attributable to heads, got mean TV {tv:.4}"
    );
}

#[test]
fn stage1_then_stage3_round_trip_is_deterministic() {
    let truth_cfg = GroundTruthConfig {
        k: 2,
        d: 6,
        items: 60,
        seed: 3,
        cohorts: vec![
            CohortSpec {
                cohort_id: "t0".into(),
                size: 6,
                weights: WeightDistribution::Dirichlet { alpha: vec![0.5] },
            },
            CohortSpec {
                cohort_id: "t1".into(),
                size: 4,
                weights: WeightDistribution::OneHotMixture { p: vec![0.5, 0.5] },
            },
        ],
    };
    let truth: apa_core::lab::GroundTruth = generate_ground_truth(&truth_cfg).unwrap();
    let d0 = simulate_comparisons(&truth, 100, 1.0, 4)
        .unwrap()
        .retain_cohorts(&["t0"]);
    let d1 = simulate_comparisons(&truth, 30, 1.0, 5)
        .unwrap()
        .retain_cohorts(&["t1"]);

    let cfg = TrainConfig {
        k: 2,
        max_epochs: 120,
        ..TrainConfig::default()
    };
    let (m1, w1, r1) = train_joint(&d0, &truth.catalog, &cfg).unwrap();
    let (m2, w2, r2) = train_joint(&d0, &truth.catalog, &cfg).unwrap();
    assert_eq!((&m1, &w1, &r1), (&m2, &w2, &r2));

    let (a1, ar1) = fit_weights(&m1, &d1, &truth.catalog, &cfg).unwrap();
    let (a2, ar2) = fit_weights(&m2, &d1, &truth.catalog, &cfg).unwrap();
    assert_eq!((&a1, &ar1), (&a2, &ar2));

    // Alignment metric is defined for matching tables only.
    assert!(best_permutation_tv(&a1, &w1).is_none());
}
