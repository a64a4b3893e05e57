use mlmc_grad::optimizers::{run_sgd, run_vr, StopReason, StopRule};
use mlmc_grad::problems::{CsoToy, NoiselessQuadratic};
use mlmc_grad::{Error, Estimator, EstimatorConfig, EstimatorKind, Oracle, RunOptions, StepSchedule, VrConfig};
use proptest::prelude::*;

fn kinds() -> impl Strategy<Value = EstimatorKind> {
    prop_oneof![
        Just(EstimatorKind::LSgd),
        Just(EstimatorKind::VMlmc),
        Just(EstimatorKind::RtMlmc),
        Just(EstimatorKind::RuMlmc),
        Just(EstimatorKind::RrMlmc),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn budget_law(kind in kinds(), budget in 1u64..40_000, seed: u64) {
        let toy = CsoToy::linear_inner();
        let est = Estimator::new(EstimatorConfig::new(kind, 4), &toy).unwrap();
        let opts = RunOptions::new(usize::MAX, seed).with_budget(budget);
        let rec = run_sgd(&toy, &est, &StepSchedule::Constant(0.01), &opts, &toy.default_start()).unwrap();
        prop_assert_eq!(rec.stop, StopReason::Budget);
        prop_assert!(rec.total_cost <= budget);
        prop_assert!(rec.total_cost + rec.max_estimate_cost >= budget);
        prop_assert_eq!(rec.trajectory.last().unwrap().cum_cost, rec.total_cost);
    }

    #[test]
    fn vr_budget_law(budget in 100u64..40_000, seed: u64, extra in 0usize..16, d2 in 1usize..5, epoch in 1usize..8) {
        let toy = CsoToy::general();
        let est = Estimator::new(EstimatorConfig::new(EstimatorKind::RtMlmc, 5), &toy).unwrap();
        let vr = VrConfig { d1: d2 + extra, d2, epoch, step: 0.05 };
        let opts = RunOptions::new(usize::MAX, seed).with_budget(budget);
        let rec = run_vr(&toy, &est, &vr, &opts, &toy.default_start()).unwrap();
        prop_assert_eq!(rec.stop, StopReason::Budget);
        prop_assert!(rec.total_cost <= budget);
        prop_assert!(rec.total_cost + rec.max_estimate_cost >= budget);
    }

    #[test]
    fn seeded_runs_are_identical(kind in kinds(), seed: u64, vr in any::<bool>()) {
        let toy = CsoToy::linear_inner();
        let est = Estimator::new(EstimatorConfig::new(kind, 3), &toy).unwrap();
        let opts = RunOptions::new(200, seed).recording();
        let run = || if vr {
            run_vr(&toy, &est, &VrConfig { d1: 4, d2: 1, epoch: 5, step: 0.05 }, &opts, &toy.default_start())
        } else {
            run_sgd(&toy, &est, &StepSchedule::Constant(0.05), &opts, &toy.default_start())
        };
        let (a, b) = (run().unwrap(), run().unwrap());
        prop_assert_eq!(a.trajectory_csv(), b.trajectory_csv());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn crossings_are_ordered_by_target(seed: u64, loose in 0.01f64..0.5, shrink in 0.05f64..1.0) {
        let toy = CsoToy::general();
        let est = Estimator::new(EstimatorConfig::new(EstimatorKind::RtMlmc, 6), &toy).unwrap();
        let f_star = toy.objective(&toy.minimizer().unwrap()).unwrap();
        let rec = run_sgd(&toy, &est, &StepSchedule::Constant(0.05), &RunOptions::new(400, seed), &toy.default_start()).unwrap();
        let gap = |target| StopRule::Gap { target, reference: f_star };
        let a = rec.crossing(&gap(loose));
        let b = rec.crossing(&gap(loose * shrink));
        if let Some((tb, cb)) = b {
            let (ta, ca) = a.expect("a tighter target was met, so the looser one was too");
            prop_assert!(ta <= tb && ca <= cb);
        }
    }

    #[test]
    fn noiseless_quadratic_contracts(x0 in -5.0f64..5.0, x1 in -5.0f64..5.0, gamma in 0.05f64..1.0) {
        let q = NoiselessQuadratic::new(2);
        let est = Estimator::new(EstimatorConfig::new(EstimatorKind::LSgd, 0), &q).unwrap();
        let rec = run_sgd(&q, &est, &StepSchedule::Constant(gamma), &RunOptions::new(50, 0), &[x0, x1]).unwrap();
        let factor = (1.0 - gamma).powi(50);
        prop_assert!((rec.last[0] - x0 * factor).abs() < 1e-12);
        prop_assert!((rec.last[1] - x1 * factor).abs() < 1e-12);
        prop_assert_eq!(rec.output.clone(), rec.last.clone());
    }
}

#[test]
fn large_steps_diverge() {
    let q = NoiselessQuadratic::new(2);
    let est = Estimator::new(EstimatorConfig::new(EstimatorKind::LSgd, 0), &q).unwrap();
    let err = run_sgd(&q, &est, &StepSchedule::Constant(3.0), &RunOptions::new(10_000, 0), &[1.0, 1.0]).unwrap_err();
    match err {
        Error::Divergence { iteration, last_finite } => {
            assert!(iteration > 1);
            assert!(last_finite.iter().all(|v| v.is_finite()));
        }
        other => panic!("expected divergence, got {other}"),
    }
}

#[test]
fn target_stop_ends_at_the_crossing() {
    let toy = CsoToy::general();
    let est = Estimator::new(EstimatorConfig::new(EstimatorKind::RtMlmc, 6), &toy).unwrap();
    let f_star = toy.objective(&toy.minimizer().unwrap()).unwrap();
    let rule = StopRule::Gap { target: 0.05, reference: f_star };
    let full = run_sgd(&toy, &est, &StepSchedule::Constant(0.05), &RunOptions::new(2_000, 9), &toy.default_start()).unwrap();
    let stopped = run_sgd(
        &toy,
        &est,
        &StepSchedule::Constant(0.05),
        &RunOptions::new(2_000, 9).with_stop(rule),
        &toy.default_start(),
    )
    .unwrap();
    let (t, cost) = full.crossing(&rule).unwrap();
    assert_eq!(stopped.stop, StopReason::Target);
    assert_eq!((stopped.iterations, stopped.total_cost), (t, cost));
    assert_eq!(stopped.trajectory[..], full.trajectory[..=t]);
}

#[test]
fn nonconvex_output_is_a_visited_iterate() {
    let toy = CsoToy::nonconvex();
    let est = Estimator::new(EstimatorConfig::new(EstimatorKind::RtMlmc, 4), &toy).unwrap();
    let rec = run_sgd(&toy, &est, &StepSchedule::Constant(0.02), &RunOptions::new(300, 4).recording(), &toy.default_start())
        .unwrap();
    assert_eq!(rec.iterates[rec.output_index], rec.output);
    assert!(rec.output_index >= 1 && rec.output_index <= rec.iterations);
}

#[test]
fn invalid_options_are_rejected() {
    let toy = CsoToy::general();
    let est = Estimator::new(EstimatorConfig::new(EstimatorKind::LSgd, 2), &toy).unwrap();
    let s = StepSchedule::Constant(0.1);
    let x = toy.default_start();
    assert!(matches!(run_sgd(&toy, &est, &s, &RunOptions::new(0, 0), &x), Err(Error::InvalidInput(_))));
    assert!(matches!(run_sgd(&toy, &est, &s, &RunOptions::new(5, 0).with_budget(0), &x), Err(Error::InvalidInput(_))));
    assert!(matches!(run_sgd(&toy, &est, &s, &RunOptions::new(5, 0), &[f64::NAN, 0.0]), Err(Error::InvalidInput(_))));
    assert!(run_sgd(&toy, &est, &StepSchedule::Constant(-1.0), &RunOptions::new(5, 0), &x).is_err());
    let bad = VrConfig { d1: 0, d2: 1, epoch: 1, step: 0.1 };
    assert!(run_vr(&toy, &est, &bad, &RunOptions::new(5, 0), &x).is_err());
}
