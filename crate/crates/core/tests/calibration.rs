mod common;

use std::sync::OnceLock;

use common::small_world;
use mint_core::baselines::{run_policy_all, Policy, PolicyContext};
use mint_core::calibrate::{
    calibrate, calibrate_task1, calibrate_task2, fit_msp_tau, objectives_from_summaries, select,
    CalibrationReport, EpisodeSummary, FullInputResults, PerformanceLoss, Task, ThresholdGrid,
};
use mint_core::engine::{train_image_value_model, EngineConfig, ImageValueModel, Opening};
use mint_core::synthdata::SyntheticData;
use mint_core::{Error, TrainedModel};
use proptest::prelude::*;

struct World {
    data: SyntheticData,
    model: TrainedModel,
    ivm: ImageValueModel,
    report: CalibrationReport,
}

fn ctx(w: &World) -> PolicyContext<'_> {
    PolicyContext {
        model: &w.model,
        schema: &w.data.schema,
        ivm: Some(&w.ivm),
        global_order: None,
        opening: Opening::FirstListed,
    }
}

fn world() -> &'static World {
    static W: OnceLock<World> = OnceLock::new();
    W.get_or_init(|| {
        let (data, model) = small_world(21);
        let ivm = train_image_value_model(&model, &data.val, &data.schema, 21).unwrap();
        let c = PolicyContext {
            model: &model,
            schema: &data.schema,
            ivm: Some(&ivm),
            global_order: None,
            opening: Opening::FirstListed,
        };
        let (_, report) = calibrate(
            &data.val,
            &c,
            &EngineConfig::default(),
            &ThresholdGrid::default(),
            PerformanceLoss::Top3Aggregate,
            Task::Task1 { epsilon2: 0.02 },
        );
        let report = report.unwrap();
        World {
            data,
            model,
            ivm,
            report,
        }
    })
}

fn available(w: &World) -> f64 {
    w.data
        .val
        .iter()
        .map(|c| c.num_inputs() as f64)
        .sum::<f64>()
        / w.data.val.len() as f64
}

#[test]
fn unconstrained_task1_takes_the_largest_reduction() {
    let w = world();
    let op = select(&w.report.points, Task::Task1 { epsilon2: 1.0 }).unwrap();
    let best = w
        .report
        .points
        .iter()
        .map(|p| p.achieved.o1)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(op.achieved.o1, best);
    // Both thresholds at +infinity keep only the opening image.
    assert_eq!(op.achieved.mean_inputs_acquired, 1.0);
}

#[test]
fn zero_tolerance_task1_keeps_accuracy() {
    let w = world();
    let op = select(&w.report.points, Task::Task1 { epsilon2: 0.0 }).unwrap();
    assert_eq!(op.achieved.o2, 0.0);
    assert!(op.achieved.o1 >= 0.0);
    let exhaustive = w
        .report
        .points
        .iter()
        .find(|p| p.t_meta.0 == f64::NEG_INFINITY && p.t_image.0 == f64::NEG_INFINITY);
    assert_eq!(exhaustive.unwrap().achieved.o1, 0.0);
}

#[test]
fn zero_budget_task2_has_zero_loss() {
    let w = world();
    let op = select(&w.report.points, Task::Task2 { epsilon1: 0.0 }).unwrap();
    assert_eq!(op.achieved.o2, 0.0);
}

#[test]
fn extreme_budget_forces_minimal_acquisition() {
    let w = world();
    let eps = available(w) - 2.0;
    let op = calibrate_task2(
        &w.data.val,
        &ctx(w),
        &EngineConfig::default(),
        eps,
        &ThresholdGrid::default(),
    )
    .unwrap();
    assert!(op.achieved.mean_inputs_acquired <= 2.0 + 1e-12);
    assert!(op.achieved.o1 >= eps - 1e-12);
}

#[test]
fn infeasible_requests_error_with_the_best_value() {
    let w = world();
    let err = select(
        &w.report.points,
        Task::Task2 {
            epsilon1: available(w),
        },
    )
    .unwrap_err();
    assert!(
        matches!(
            err,
            Error::Infeasible {
                objective: "O1",
                ..
            }
        ),
        "{err:?}"
    );
    let grid = ThresholdGrid {
        t_meta: vec![f64::INFINITY],
        t_image: vec![f64::INFINITY],
    };
    match calibrate_task1(&w.data.val, &ctx(w), &EngineConfig::default(), 0.0, &grid) {
        Err(Error::Infeasible {
            objective: "O2",
            best,
        }) => assert!(best > 0.0),
        other => panic!("{other:?}"),
    }
    assert!(calibrate_task1(&w.data.val, &ctx(w), &EngineConfig::default(), -0.1, &grid).is_err());
}

#[test]
fn achieved_statistics_reproduce_on_a_fresh_run() {
    let w = world();
    let base = EngineConfig::default();
    let op = w.report.chosen.clone().unwrap();
    let tr = run_policy_all(
        &Policy::Mint {
            config: op.engine_config(&base),
        },
        &w.data.val,
        &ctx(w),
    )
    .unwrap();
    let full = FullInputResults::compute(&w.data.val, &w.model, &w.data.schema).unwrap();
    let s: Vec<EpisodeSummary> = tr
        .iter()
        .zip(&full.labels)
        .map(|(t, l)| EpisodeSummary::of(t, *l))
        .collect();
    let fresh = objectives_from_summaries(&s, &full, PerformanceLoss::Top3Aggregate).unwrap();
    assert_eq!(fresh, op.achieved);
    for p in &w.report.points {
        assert!(p.achieved.o2 >= 0.0);
    }
}

#[test]
fn msp_tau_extremes() {
    let w = world();
    let c = ctx(w);
    assert_eq!(fit_msp_tau(&w.data.val, &c, 1.0, 0).unwrap(), (0.0, 1.0));
    let all = w
        .data
        .val
        .iter()
        .map(|c| c.images.len() as f64)
        .sum::<f64>()
        / w.data.val.len() as f64;
    let (tau, m) = fit_msp_tau(&w.data.val, &c, all, 0).unwrap();
    assert!((m - all).abs() <= 0.1);
    assert!(tau > 0.5);
    assert!(fit_msp_tau(&w.data.val, &c, all + 1.0, 0).is_err());
}

proptest! {
    #[test]
    fn relaxing_constraints_never_hurts(a in 0.0f64..0.3, b in 0.0f64..0.3, c in 0.0f64..14.0, d in 0.0f64..14.0) {
        let w = world();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let t1 = |e| select(&w.report.points, Task::Task1 { epsilon2: e }).unwrap().achieved.o1;
        prop_assert!(t1(lo) <= t1(hi));
        let (lo, hi) = if c <= d { (c, d) } else { (d, c) };
        let t2 = |e| select(&w.report.points, Task::Task2 { epsilon1: e }).map(|p| p.achieved.o2);
        if let (Ok(tight), Ok(loose)) = (t2(hi), t2(lo)) {
            prop_assert!(loose <= tight);
        } else {
            prop_assert!(t2(lo).is_ok() || t2(hi).is_err());
        }
    }
}
