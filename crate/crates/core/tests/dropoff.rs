mod common;

use common::{yes_no_schema, FnClassifier};
use mint_core::baselines::{run_policy, Policy, PolicyContext};
use mint_core::dropoff::{compare, expected_drop_rate, simulate, FlowModel, ImagesScreen, Screen};
use mint_core::engine::{EpisodeTranscript, Opening};
use mint_core::{AnswerValue, Case, ImageRecord, MetadataSchema, MetricKind, Severity, ViewType};
use proptest::prelude::*;

const FIELDS: usize = 4;

fn case(id: u64, n_images: usize) -> Case {
    Case {
        case_id: id,
        images: (0..n_images)
            .map(|i| ImageRecord {
                view: ViewType::Near,
                embedding: vec![i as f64],
            })
            .collect(),
        metadata: (0..FIELDS)
            .map(|f| AnswerValue::Categorical((id as usize + f) % 2))
            .collect(),
        label: (id % 3) as usize,
        difficulty: 0.0,
        severity: Severity::Low,
    }
}

fn classifier() -> FnClassifier {
    FnClassifier::new(3, |images, answers| {
        let shift = answers.len() as f64 * 0.05 + images.len() as f64 * 0.02;
        vec![0.5 - shift, 0.3, 0.2 + shift]
    })
}

/// Transcripts asking `n_meta` fields and showing `n_images` images per case.
fn transcripts(
    model: &FnClassifier,
    schema: &MetadataSchema,
    cases: &[Case],
    budgets: &[(Option<usize>, Option<usize>)],
) -> Vec<EpisodeTranscript> {
    let ctx = PolicyContext {
        model,
        schema,
        ivm: None,
        global_order: None,
        opening: Opening::FirstListed,
    };
    cases
        .iter()
        .zip(budgets)
        .map(|(c, (m, i))| {
            let p = Policy::FixedBudget {
                n_meta: *m,
                n_images: *i,
                metric: MetricKind::Js,
            };
            run_policy(&p, c, &ctx).unwrap()
        })
        .collect()
}

fn labels(cases: &[Case]) -> Vec<usize> {
    cases.iter().map(|c| c.label).collect()
}

#[test]
fn single_screen_drop_rate_is_binomial() {
    let schema = yes_no_schema(1);
    let model = classifier();
    let cases: Vec<Case> = (0..500).map(|i| case(i, 1)).collect();
    let cases: Vec<Case> = cases
        .into_iter()
        .map(|mut c| {
            c.metadata.truncate(1);
            c
        })
        .collect();
    let tr = transcripts(&model, &schema, &cases, &vec![(None, None); 500]);
    let flow = FlowModel::uniform(&schema, 0.1, 0.0);
    let r = simulate(&tr, &flow, &schema, 1000, 3, &labels(&cases), 3).unwrap();
    assert!(
        (0.09..=0.11).contains(&r.drop_rate.mean),
        "{:?}",
        r.drop_rate
    );
    // Spread across simulations matches Binomial(500, 0.1) / 500.
    let sd_want = (0.1f64 * 0.9 / 500.0).sqrt();
    let xs: Vec<f64> = r.per_sim.iter().map(|s| s.drop_rate).collect();
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt();
    assert!((sd / sd_want - 1.0).abs() < 0.1, "sd {sd} vs {sd_want}");
}

#[test]
fn zero_drop_probability_never_drops() {
    let schema = yes_no_schema(FIELDS);
    let model = classifier();
    let cases: Vec<Case> = (0..60).map(|i| case(i, 3)).collect();
    let tr = transcripts(&model, &schema, &cases, &vec![(None, None); 60]);
    let flow = FlowModel::uniform(&schema, 0.0, 0.0);
    let r = simulate(&tr, &flow, &schema, 50, 1, &labels(&cases), 3).unwrap();
    assert_eq!(r.drop_rate.mean, 0.0);
    assert_eq!(r.correct_shown_rate.mean, 1.0);
    let r = simulate(&tr, &flow, &schema, 50, 1, &labels(&cases), 1).unwrap();
    let top1 = tr
        .iter()
        .zip(&cases)
        .filter(|(t, c)| t.final_prediction().in_top_k(c.label, 1))
        .count() as f64
        / 60.0;
    assert!(r.per_sim.iter().all(|s| s.correct_shown_rate == top1));
}

#[test]
fn certain_drop_drops_everyone() {
    let schema = yes_no_schema(FIELDS);
    let model = classifier();
    let cases: Vec<Case> = (0..40).map(|i| case(i, 2)).collect();
    let tr = transcripts(&model, &schema, &cases, &vec![(Some(0), Some(1)); 40]);
    let flow = FlowModel::uniform(&schema, 0.0, 1.0);
    let r = simulate(&tr, &flow, &schema, 10, 1, &labels(&cases), 3).unwrap();
    assert_eq!(r.drop_rate.mean, 1.0);
    assert_eq!(r.correct_shown_rate.mean, 0.0);
}

#[test]
fn simulation_agrees_with_closed_form() {
    let schema = yes_no_schema(FIELDS);
    let model = classifier();
    let cases: Vec<Case> = (0..300).map(|i| case(i, 1 + (i as usize % 4))).collect();
    let budgets: Vec<_> = (0..300).map(|i| (Some(i % (FIELDS + 1)), None)).collect();
    let tr = transcripts(&model, &schema, &cases, &budgets);
    let flow = FlowModel::uniform(&schema, 0.03, 0.08);
    let r = simulate(&tr, &flow, &schema, 1000, 11, &labels(&cases), 3).unwrap();
    let want = expected_drop_rate(&tr, &flow, &schema).unwrap();
    let xs: Vec<f64> = r.per_sim.iter().map(|s| s.drop_rate).collect();
    let sd = (xs
        .iter()
        .map(|x| (x - r.drop_rate.mean).powi(2))
        .sum::<f64>()
        / 999.0)
        .sqrt();
    let se = sd / 1000f64.sqrt();
    assert!(
        (r.drop_rate.mean - want).abs() <= 3.0 * se,
        "{} vs {want} (se {se})",
        r.drop_rate.mean
    );
}

#[test]
fn identical_sets_have_zero_deltas() {
    let schema = yes_no_schema(FIELDS);
    let model = classifier();
    let cases: Vec<Case> = (0..50).map(|i| case(i, 2)).collect();
    let tr = transcripts(&model, &schema, &cases, &vec![(Some(2), None); 50]);
    let flow = FlowModel::default_for(&schema);
    let c = compare(&tr, &tr, &flow, &schema, 200, 4, &labels(&cases), 3).unwrap();
    assert_eq!(
        (
            c.delta_drop_rate.mean,
            c.delta_drop_rate.lo,
            c.delta_drop_rate.hi
        ),
        (0.0, 0.0, 0.0)
    );
    assert_eq!(c.delta_correct_shown_rate.mean, 0.0);
    assert_eq!(c.dominance_violations, 0);
    assert!(c.subset_exposure);
}

#[test]
fn mismatched_case_sets_are_rejected() {
    let schema = yes_no_schema(FIELDS);
    let model = classifier();
    let cases: Vec<Case> = (0..5).map(|i| case(i, 2)).collect();
    let tr = transcripts(&model, &schema, &cases, &vec![(None, None); 5]);
    let flow = FlowModel::default_for(&schema);
    assert!(compare(
        &tr[..4],
        &tr[1..],
        &flow,
        &schema,
        10,
        0,
        &labels(&cases[..4]),
        3
    )
    .is_err());
    assert!(simulate(&tr, &flow, &schema, 0, 0, &labels(&cases), 3).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn fewer_inputs_never_drop_more(
        budgets in proptest::collection::vec((0usize..=FIELDS, 1usize..=4), 20..60),
        p_screen in 0.0f64..0.3,
        p_images in 0.0f64..0.5,
        seed in 0u64..1000,
    ) {
        let schema = yes_no_schema(FIELDS);
        let model = classifier();
        let cases: Vec<Case> = (0..budgets.len() as u64).map(|i| case(i, 4)).collect();
        let mint_b: Vec<_> = budgets.iter().map(|(m, i)| (Some(*m), Some(*i))).collect();
        let mint = transcripts(&model, &schema, &cases, &mint_b);
        let full = transcripts(&model, &schema, &cases, &vec![(None, None); cases.len()]);
        let flow = FlowModel::uniform(&schema, p_screen, p_images);
        let c = compare(&mint, &full, &flow, &schema, 100, seed, &labels(&cases), 3).unwrap();
        prop_assert!(c.subset_exposure);
        prop_assert_eq!(c.dominance_violations, 0);
    }

    #[test]
    fn drop_rate_is_monotone_in_screen_probability(a in 0.0f64..1.0, b in 0.0f64..1.0, seed in 0u64..1000) {
        let schema = yes_no_schema(FIELDS);
        let model = classifier();
        let cases: Vec<Case> = (0..30).map(|i| case(i, 2)).collect();
        let tr = transcripts(&model, &schema, &cases, &vec![(Some(2), None); 30]);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let run = |p| simulate(&tr, &FlowModel::uniform(&schema, p, 0.1), &schema, 50, seed, &labels(&cases), 3).unwrap();
        let (l, h) = (run(lo), run(hi));
        for (x, y) in l.per_sim.iter().zip(&h.per_sim) {
            prop_assert!(x.drop_rate <= y.drop_rate);
        }
    }
}

#[test]
fn flow_needs_every_screen() {
    let schema = yes_no_schema(2);
    let flow = FlowModel {
        screens: vec![Screen {
            screen_id: 0,
            p_drop: 0.1,
        }],
        images_screen: ImagesScreen {
            p_drop: 0.1,
            n_images_nominal: 3,
        },
    };
    assert!(flow.validate(&schema).is_err());
}
