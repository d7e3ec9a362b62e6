//! Acceptance suite: one PASS/FAIL line per criterion on the default
//! synthetic dataset. Exits non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use mint_core::baselines::{fit_global_order, run_policy_all, Policy, PolicyContext};
use mint_core::calibrate::{
    calibrate_task1, calibrate_task2, evaluate_objectives, quantile_meta_axis, sweep,
    FullInputResults, OperatingPoint, PerformanceLoss, ThresholdGrid,
};
use mint_core::classifier::{loss_and_gradients, train, Example};
use mint_core::dropoff::{compare, expected_drop_rate, simulate, FlowModel};
use mint_core::engine::{
    estimate_metadata_value, run_episode, train_image_value_model, write_transcripts_jsonl,
    AcquiredImage, AcquisitionState, Engine, EngineConfig, EpisodeTranscript, ImageValueModel,
    Opening,
};
use mint_core::eval::{
    final_accuracy, histogram_variance, input_histogram, interaction_curve, InputKind,
};
use mint_core::rng::stream;
use mint_core::synthdata::{generate, GeneratorConfig, SyntheticData};
use mint_core::{
    encode_metadata, AnswerValue, Answers, Case, Classifier, FieldId, FieldKind, FieldSpec, Fusion,
    MetadataSchema, MetricKind, ModelConfig, PredictiveDistribution, TrainedModel,
};
use mint_service::{router, AppState, Resources, Snapshot, DEFAULT_TTL};
use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::json;
use tower::ServiceExt;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct World {
    seed: u64,
    data: SyntheticData,
    model: TrainedModel,
    ivm: ImageValueModel,
    global_order: Vec<FieldId>,
}

impl World {
    fn build(seed: u64) -> World {
        let g = GeneratorConfig {
            seed,
            ..Default::default()
        };
        let data = generate(&g).unwrap();
        let config = ModelConfig {
            seed,
            embedding_dim: g.embedding_dim,
            num_classes: g.num_classes,
            ..Default::default()
        };
        let (model, _) = train(&data.train, &data.val, &data.schema, &config).unwrap();
        let ivm = train_image_value_model(&model, &data.val, &data.schema, seed).unwrap();
        let global_order = fit_global_order(&data.val, &model, &data.schema).unwrap();
        World {
            seed,
            data,
            model,
            ivm,
            global_order,
        }
    }

    fn ctx(&self, opening: Opening, with_ivm: bool) -> PolicyContext<'_> {
        PolicyContext {
            model: &self.model,
            schema: &self.data.schema,
            ivm: with_ivm.then_some(&self.ivm),
            global_order: Some(&self.global_order),
            opening,
        }
    }

    fn labels(&self) -> Vec<usize> {
        self.data.test.iter().map(|c| c.label).collect()
    }

    /// Task 1 at epsilon2 = 0.02 on the default grid, full acquisition.
    fn task1(&self) -> OperatingPoint {
        calibrate_task1(
            &self.data.val,
            &self.ctx(Opening::FirstListed, true),
            &EngineConfig::default(),
            0.02,
            &ThresholdGrid::default(),
        )
        .unwrap()
    }
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn criterion(name: &str, results: &mut Vec<bool>, f: impl FnOnce() -> Outcome) {
    let start = Instant::now();
    let o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        outcome(false, format!("panicked: {msg}"))
    });
    println!(
        "{} {name}: {} [{:.1}s]",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        start.elapsed().as_secs_f64()
    );
    results.push(o.pass);
}

fn full_prediction(
    model: &dyn Classifier,
    schema: &MetadataSchema,
    case: &Case,
) -> PredictiveDistribution {
    let images: Vec<&[f64]> = case.images.iter().map(|i| i.embedding.as_slice()).collect();
    let answers: Answers = schema
        .fields()
        .iter()
        .map(|f| (f.id, case.metadata[f.id]))
        .collect();
    model.predict(&images, &answers, schema).unwrap()
}

fn exhaustive_exactness(w: &World) -> Outcome {
    let start = Instant::now();
    let config = EngineConfig::exhaustive(MetricKind::Js);
    let ctx = w.ctx(Opening::FirstListed, true);
    let engine = Engine::new(ctx.model, ctx.schema, ctx.ivm, &config);
    let cases = &w.data.test;
    let transcripts: Vec<EpisodeTranscript> = cases
        .iter()
        .map(|c| run_episode(&engine, c, Opening::FirstListed).unwrap())
        .collect();
    let elapsed = start.elapsed();
    let mismatched = transcripts
        .iter()
        .zip(cases)
        .filter(|(t, c)| {
            let want = full_prediction(&w.model, &w.data.schema, c);
            let got = t.final_prediction();
            got.probs()
                .iter()
                .zip(want.probs())
                .any(|(a, b)| a.to_bits() != b.to_bits())
        })
        .count();
    let full = FullInputResults::compute(cases, &w.model, &w.data.schema).unwrap();
    let (o1, o2) =
        evaluate_objectives(&transcripts, &full, PerformanceLoss::Top3Aggregate).unwrap();
    outcome(
        cases.len() == 500
            && mismatched == 0
            && o1 == 0.0
            && o2 == 0.0
            && elapsed < Duration::from_secs(60),
        format!(
            "{} cases, {mismatched} differing bitwise, O1 = {o1}, O2 = {o2}, {:.1}s",
            cases.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn oracle_entropy_bits(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|x| **x > 0.0)
        .map(|x| x * x.log2())
        .sum::<f64>()
}

fn oracle_distance(metric: MetricKind, p: &[f64], q: &[f64]) -> f64 {
    match metric {
        MetricKind::Kl => {
            let floor = |v: &[f64]| {
                let c: Vec<f64> = v.iter().map(|x| x.max(1e-12)).collect();
                let s: f64 = c.iter().sum();
                c.into_iter().map(|x| x / s).collect::<Vec<_>>()
            };
            let (p, q) = (floor(p), floor(q));
            p.iter()
                .zip(&q)
                .map(|(a, b)| a * (a.ln() - b.ln()))
                .sum::<f64>()
                .max(0.0)
        }
        MetricKind::Js => {
            let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a + b) / 2.0).collect();
            let d =
                oracle_entropy_bits(&m) - (oracle_entropy_bits(p) + oracle_entropy_bits(q)) / 2.0;
            d.clamp(0.0, 1.0).sqrt()
        }
        MetricKind::Entropy => (oracle_entropy_bits(p) - oracle_entropy_bits(q)).abs(),
    }
}

fn oracle_value(
    model: &dyn Classifier,
    schema: &MetadataSchema,
    images: &[&[f64]],
    answers: &Answers,
    field: &FieldSpec,
    metric: MetricKind,
) -> f64 {
    let now = model.predict(images, answers, schema).unwrap();
    let branches: Vec<AnswerValue> = match &field.kind {
        FieldKind::Categorical { cardinality, .. } => {
            (0..=*cardinality).map(AnswerValue::Categorical).collect()
        }
        FieldKind::Scalar { p10, p50, p90, .. } => [p10, p50, p90]
            .iter()
            .map(|x| AnswerValue::Scalar(**x))
            .collect(),
    };
    let total: f64 = branches
        .iter()
        .map(|b| {
            let mut a = answers.clone();
            a.insert(field.id, *b);
            let new = model.predict(images, &a, schema).unwrap();
            oracle_distance(metric, now.probs(), new.probs())
        })
        .sum();
    total / branches.len() as f64
}

struct Toy;

impl Classifier for Toy {
    fn num_classes(&self) -> usize {
        2
    }

    fn predict(
        &self,
        _: &[&[f64]],
        answers: &Answers,
        _: &MetadataSchema,
    ) -> mint_core::Result<PredictiveDistribution> {
        PredictiveDistribution::new(match answers.get(&0) {
            Some(AnswerValue::Categorical(0)) => vec![0.9, 0.1],
            Some(AnswerValue::Categorical(1)) => vec![0.1, 0.9],
            _ => vec![0.5, 0.5],
        })
    }
}

fn image_of(case: &Case, index: usize) -> AcquiredImage {
    AcquiredImage {
        index,
        requested: None,
        view: case.images[index].view,
        embedding: case.images[index].embedding.clone(),
    }
}

fn value_oracle(w: &World) -> Outcome {
    let schema = &w.data.schema;
    let mut rng = stream(w.seed, "acceptance-value-oracle");
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for _ in 0..100 {
        let case = &w.data.test[rng.random_range(0..w.data.test.len())];
        let mut order: Vec<usize> = (0..case.images.len()).collect();
        order.shuffle(&mut rng);
        let n_img = rng.random_range(1..=order.len());
        let mut state =
            AcquisitionState::new(case.case_id, image_of(case, order[0]), &w.model, schema)
                .unwrap();
        for &i in &order[1..n_img] {
            state
                .add_image(image_of(case, i), true, &w.model, schema)
                .unwrap();
        }
        let mut fields: Vec<usize> = (0..schema.len()).collect();
        fields.shuffle(&mut rng);
        let n_ans = rng.random_range(0..fields.len());
        for &f in &fields[..n_ans] {
            state
                .add_answer(f, case.metadata[f], &w.model, schema)
                .unwrap();
        }
        let target = schema.field(fields[n_ans]).unwrap();
        for metric in MetricKind::ALL {
            let got = estimate_metadata_value(&state, target, &w.model, schema, metric).unwrap();
            let want = oracle_value(
                &w.model,
                schema,
                &state.image_slices(),
                state.answers(),
                target,
                metric,
            );
            worst = worst.max((got - want).abs());
            checked += 1;
        }
    }
    let (half, skew) = ([0.5, 0.5], [0.9, 0.1]);
    let toy_schema = MetadataSchema::new(vec![FieldSpec {
        id: 0,
        name: "q0".into(),
        kind: FieldKind::categorical(2),
        screen_id: 0,
    }])
    .unwrap();
    let first = AcquiredImage {
        index: 0,
        requested: None,
        view: mint_core::ViewType::Near,
        embedding: vec![0.0],
    };
    let state = AcquisitionState::new(0, first, &Toy, &toy_schema).unwrap();
    let toy_value = estimate_metadata_value(
        &state,
        toy_schema.field(0).unwrap(),
        &Toy,
        &toy_schema,
        MetricKind::Kl,
    )
    .unwrap();
    let dist = |m: MetricKind| {
        m.distance(
            &PredictiveDistribution::new(half.to_vec()).unwrap(),
            &PredictiveDistribution::new(skew.to_vec()).unwrap(),
        )
        .unwrap()
    };
    let toys = [
        (dist(MetricKind::Kl), 0.510825),
        (dist(MetricKind::Js), 0.383135),
        (dist(MetricKind::Entropy), 0.531004),
        (toy_value, 0.340550),
    ];
    let toy_ok = toys.iter().all(|(got, want)| (got - want).abs() <= 1e-6);
    outcome(
        checked == 300 && worst <= 1e-12 && toy_ok,
        format!(
            "{checked} state/metric pairs, max |diff| {worst:.2e}; toy values {:?}",
            toys.iter()
                .map(|(g, _)| format!("{g:.6}"))
                .collect::<Vec<_>>()
        ),
    )
}

fn ordering(worlds: &[World]) -> Outcome {
    let mut beats_random = 0;
    let mut beats_global = [0, 0];
    let mut lines = Vec::new();
    for w in worlds {
        let ctx = w.ctx(Opening::AllImages, false);
        let labels = w.labels();
        let auc = |p: Policy| {
            let t = run_policy_all(&p, &w.data.test, &ctx).unwrap();
            interaction_curve(&t, &labels, 3).unwrap().auc
        };
        let js = auc(Policy::Mint {
            config: EngineConfig::exhaustive(MetricKind::Js),
        });
        let kl = auc(Policy::Mint {
            config: EngineConfig::exhaustive(MetricKind::Kl),
        });
        let random = auc(Policy::Random { seed: w.seed });
        let global = auc(Policy::GlobalStatic);
        if js > random && kl > random {
            beats_random += 1;
        }
        beats_global[0] += (js >= global) as usize;
        beats_global[1] += (kl >= global) as usize;
        lines.push(format!(
            "s{} js {js:.4} kl {kl:.4} rnd {random:.4} glb {global:.4}",
            w.seed
        ));
    }
    outcome(
        beats_random == worlds.len() && beats_global.iter().all(|n| *n >= 4),
        format!(
            "JS,KL > random in {beats_random}/5; JS >= global {}/5, KL >= global {}/5 ({})",
            beats_global[0],
            beats_global[1],
            lines.join("; ")
        ),
    )
}

fn test_achieved(
    w: &World,
    point: &OperatingPoint,
    opening: Opening,
    with_ivm: bool,
) -> mint_core::calibrate::Achieved {
    let grid = ThresholdGrid {
        t_meta: vec![point.t_meta.0],
        t_image: vec![point.t_image.0],
    };
    let base = point.engine_config(&EngineConfig::default());
    sweep(
        &w.data.test,
        &w.ctx(opening, with_ivm),
        &base,
        &grid,
        PerformanceLoss::Top3Aggregate,
    )
    .unwrap()
    .points[0]
        .achieved
        .clone()
}

fn calibration(worlds: &[World], task1: &[OperatingPoint]) -> Outcome {
    let mut task1_ok = 0;
    let mut t1 = Vec::new();
    for (w, p) in worlds.iter().zip(task1) {
        let test = test_achieved(w, p, Opening::FirstListed, true);
        if p.achieved.o2 <= 0.02 && test.o2 <= 0.04 {
            task1_ok += 1;
        }
        t1.push(format!(
            "s{} val {:.3} test {:.3}",
            w.seed, p.achieved.o2, test.o2
        ));
    }
    let mut task2_ok = 0;
    let mut t2 = Vec::new();
    for w in worlds {
        let ctx = w.ctx(Opening::AllImages, false);
        let base = EngineConfig::default();
        let axis = quantile_meta_axis(&w.data.val, &ctx, &base, 59).unwrap();
        let eps1 = w.data.schema.len() as f64 - 3.0;
        let point = calibrate_task2(
            &w.data.val,
            &ctx,
            &base,
            eps1,
            &ThresholdGrid::meta_only(axis),
        )
        .unwrap();
        let labels = w.labels();
        let mint = run_policy_all(
            &Policy::Mint {
                config: point.engine_config(&base),
            },
            &w.data.test,
            &ctx,
        )
        .unwrap();
        let fixed = Policy::FixedBudget {
            n_meta: Some(3),
            n_images: None,
            metric: MetricKind::Js,
        };
        let fixed = run_policy_all(&fixed, &w.data.test, &ctx).unwrap();
        let (a, b) = (
            final_accuracy(&mint, &labels, 3).unwrap(),
            final_accuracy(&fixed, &labels, 3).unwrap(),
        );
        let interactions =
            mint.iter().map(|t| t.interactions()).sum::<usize>() as f64 / mint.len() as f64;
        if a >= b {
            task2_ok += 1;
        }
        t2.push(format!("s{} {a:.3} vs {b:.3} @ {interactions:.2}", w.seed));
    }
    outcome(
        task1_ok == worlds.len() && task2_ok >= 4,
        format!(
            "task1 O2 bounds met {task1_ok}/5 ({}); task2 >= fixed budget {task2_ok}/5 ({})",
            t1.join(", "),
            t2.join(", ")
        ),
    )
}

fn reduction(w: &World, point: &OperatingPoint) -> Outcome {
    let test = test_achieved(w, point, Opening::FirstListed, true);
    let full = FullInputResults::compute(&w.data.test, &w.model, &w.data.schema).unwrap();
    let drop = full.top3() - test.top3_accuracy;
    outcome(
        test.reduction_fraction >= 0.30 && drop <= 0.03,
        format!(
            "t_meta {} t_image {}: {:.1}% fewer inputs, Top-3 {:.3} vs {:.3} all inputs ({:+.1}pp)",
            point.t_meta,
            point.t_image,
            100.0 * test.reduction_fraction,
            test.top3_accuracy,
            full.top3(),
            -100.0 * drop
        ),
    )
}

fn personalization(w: &World, point: &OperatingPoint) -> Outcome {
    let ctx = w.ctx(Opening::FirstListed, true);
    let hist = |p: &Policy| -> BTreeMap<usize, usize> {
        input_histogram(
            &run_policy_all(p, &w.data.test, &ctx).unwrap(),
            InputKind::Total,
        )
    };
    let mint = hist(&Policy::Mint {
        config: point.engine_config(&EngineConfig::default()),
    });
    let statics = [
        Policy::GlobalStatic,
        Policy::Random { seed: 0 },
        Policy::FixedBudget {
            n_meta: Some(3),
            n_images: Some(1),
            metric: MetricKind::Js,
        },
    ];
    let static_vars: Vec<f64> = statics
        .iter()
        .map(|p| histogram_variance(&hist(p)))
        .collect();
    let var = histogram_variance(&mint);
    outcome(
        mint.len() >= 2 && var > 0.0 && static_vars.iter().all(|v| *v == 0.0),
        format!(
            "MINT {} buckets, variance {var:.3}; static variances {static_vars:?}",
            mint.len()
        ),
    )
}

fn gradient_check() -> Outcome {
    let schema = MetadataSchema::new(vec![
        FieldSpec {
            id: 0,
            name: "fever".into(),
            kind: FieldKind::categorical(2),
            screen_id: 0,
        },
        FieldSpec {
            id: 1,
            name: "age".into(),
            kind: FieldKind::scalar(20.0, 40.0, 60.0),
            screen_id: 0,
        },
    ])
    .unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut params = 0;
    for fusion in [Fusion::Film, Fusion::Concat] {
        let config = ModelConfig {
            fusion,
            hidden_size: 5,
            meta_embed_size: 3,
            embedding_dim: 4,
            num_classes: 3,
            ..Default::default()
        };
        let mut model = TrainedModel::zeros(config, &schema).unwrap();
        let mut rng = stream(99, "acceptance-grad");
        let flat: Vec<f64> = (0..model.params.num_params())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        model.params.set_flat(&flat);
        let batch: Vec<Example> = (0..6)
            .map(|i| {
                let mut answers = Answers::new();
                answers.insert(0, AnswerValue::Categorical(i % 3));
                if i % 2 == 0 {
                    answers.insert(1, AnswerValue::Scalar(rng.random_range(10.0..80.0)));
                }
                Example {
                    pooled_image: (0..4).map(|_| rng.random_range(-2.0..2.0)).collect(),
                    metadata: encode_metadata(&answers, &schema).unwrap(),
                    label: i % 3,
                }
            })
            .collect();
        let analytic = loss_and_gradients(&model, &batch).unwrap().1.flat();
        let mut probe = model.clone();
        for i in 0..flat.len() {
            let mut at = |d: f64| {
                let mut theta = flat.clone();
                theta[i] += d;
                probe.params.set_flat(&theta);
                loss_and_gradients(&probe, &batch).unwrap().0
            };
            let numeric = (at(h) - at(-h)) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-3);
            worst = worst.max((analytic[i] - numeric).abs() / denom);
            params += 1;
        }
    }
    outcome(
        worst <= 1e-4,
        format!("{params} parameters over FiLM and concat, max relative error {worst:.2e}"),
    )
}

fn dropoff(w: &World, point: &OperatingPoint) -> Outcome {
    let ctx = w.ctx(Opening::FirstListed, true);
    let schema = &w.data.schema;
    let labels = w.labels();
    let mint = run_policy_all(
        &Policy::Mint {
            config: point.engine_config(&EngineConfig::default()),
        },
        &w.data.test,
        &ctx,
    )
    .unwrap();
    let full = run_policy_all(
        &Policy::FixedBudget {
            n_meta: None,
            n_images: None,
            metric: MetricKind::Js,
        },
        &w.data.test,
        &ctx,
    )
    .unwrap();
    let flow = FlowModel::default_for(schema);
    let n = 1000;
    let cmp = compare(&mint, &full, &flow, schema, n, 7, &labels, 3).unwrap();
    let sim = simulate(&mint, &flow, schema, n, 11, &labels, 3).unwrap();
    let rates: Vec<f64> = sim.per_sim.iter().map(|s| s.drop_rate).collect();
    let m = rates.iter().sum::<f64>() / n as f64;
    let sd = (rates.iter().map(|r| (r - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let se = sd / (n as f64).sqrt();
    let expected = expected_drop_rate(&mint, &flow, schema).unwrap();
    let zero = simulate(
        &mint,
        &FlowModel::uniform(schema, 0.0, 0.0),
        schema,
        n,
        3,
        &labels,
        3,
    )
    .unwrap();
    let zero_drops = zero.per_sim.iter().all(|s| s.drop_rate == 0.0);
    outcome(
        cmp.dominance_violations == 0 && cmp.subset_exposure && (m - expected).abs() <= 3.0 * se && zero_drops,
        format!(
            "{} dominance violations in {n} paired sims; simulated {m:.4} vs closed form {expected:.4} (SE {se:.4}); zero rates give zero drops: {zero_drops}; MINT {:.3} vs all inputs {:.3}",
            cmp.dominance_violations, cmp.mint.drop_rate.mean, cmp.full.drop_rate.mean
        ),
    )
}

fn run_pipeline(dir: &Path, threads: &str) -> Duration {
    let start = Instant::now();
    let steps: [&[&str]; 6] = [
        &["gen-data", "--seed", "1", "--out", "data"],
        &[
            "train",
            "--data",
            "data",
            "--seed",
            "1",
            "--fit-image-value",
            "--out",
            "model",
        ],
        &[
            "calibrate",
            "task1",
            "--epsilon",
            "0.02",
            "--data",
            "data",
            "--model",
            "model",
            "--out",
            "cal",
        ],
        &[
            "eval",
            "--data",
            "data",
            "--model",
            "model",
            "--policy",
            "mint:js",
            "--policy",
            "global",
            "--policy",
            "random:seed=1",
            "--policy",
            "fixed:meta=all:images=all",
            "--thresholds",
            "from:cal/cal.json",
            "--out",
            "eval",
        ],
        &[
            "dropoff",
            "--data",
            "data",
            "--transcripts",
            "eval/transcripts-0.jsonl",
            "--against",
            "eval/transcripts-3.jsonl",
            "--seed",
            "1",
            "--out",
            "dropoff",
        ],
        &[
            "replay",
            "--transcripts",
            "eval/transcripts-0.jsonl",
            "--data",
            "data",
            "--case",
            "2500",
        ],
    ];
    for args in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_mint"))
            .args(args)
            .current_dir(dir)
            .env("MINT_THREADS", threads)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        if args[0] == "replay" {
            std::fs::write(dir.join("replay.txt"), &out.stdout).unwrap();
        }
    }
    start.elapsed()
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn cli_determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ta = run_pipeline(a.path(), "1");
    let tb = run_pipeline(b.path(), "3");
    let (fa, fb) = (files(a.path()), files(b.path()));
    let differing: Vec<&String> = fa.keys().filter(|k| fb.get(*k) != fa.get(*k)).collect();
    let expected = [
        "eval/curve.csv",
        "eval/hist.csv",
        "eval/stats.json",
        "cal/cal.json",
        "dropoff/dropoff.json",
    ];
    let complete = expected.iter().all(|f| fa.contains_key(*f));
    outcome(
        fa.len() == fb.len() && differing.is_empty() && complete && ta < Duration::from_secs(600),
        format!(
            "{} artifacts across two runs (1 and 3 threads), {} differ {differing:?}; default-size pipeline took {:.1}s and {:.1}s",
            fa.len(),
            differing.len(),
            ta.as_secs_f64(),
            tb.as_secs_f64()
        ),
    )
}

fn service_equivalence(w: &World) -> Outcome {
    let cases: Vec<Case> = w.data.test.iter().take(50).cloned().collect();
    let res = Resources::new(
        w.model.clone(),
        w.data.schema.clone(),
        Some(w.ivm.clone()),
        cases.clone(),
    )
    .unwrap();
    let config = res.default_engine.clone();
    let res = Arc::new(res);
    let app = router(AppState::shared(res.clone(), DEFAULT_TTL), None);
    let rt = tokio::runtime::Runtime::new().unwrap();
    let served: Vec<EpisodeTranscript> = rt.block_on(async {
        let call = |method: &str, uri: String, body: Option<serde_json::Value>| {
            let app = app.clone();
            let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
            let req = req.body(body.map_or(Body::empty(), |b| Body::from(b.to_string()))).unwrap();
            async move {
                let resp = app.oneshot(req).await.unwrap();
                let status = resp.status();
                let bytes = resp.into_body().collect().await.unwrap().to_bytes();
                (status, serde_json::from_slice::<Snapshot>(&bytes).unwrap())
            }
        };
        let mut out = Vec::new();
        for case in &cases {
            let body = json!({ "mode": { "type": "simulated", "case_id": case.case_id }, "engine": config.token() });
            let (status, mut snap) = call("POST", "/sessions".into(), Some(body)).await;
            assert_eq!(status, StatusCode::CREATED);
            while snap.next.stop_reason.is_none() {
                let uri = format!("/sessions/{}/answer", snap.session_id);
                let (status, s) = call("POST", uri, Some(json!({ "type": "auto" }))).await;
                assert_eq!(status, StatusCode::OK);
                snap = s;
            }
            let (_, snap) = call("GET", format!("/sessions/{}", snap.session_id), None).await;
            out.push(snap.transcript);
        }
        out
    });
    let engine = Engine::new(&res.model, &res.schema, res.ivm.as_ref(), &config);
    let batch: Vec<EpisodeTranscript> = cases
        .iter()
        .map(|c| run_episode(&engine, c, Opening::FirstListed).unwrap())
        .collect();
    let bytes = |t: &[EpisodeTranscript]| {
        let mut v = Vec::new();
        write_transcripts_jsonl(&mut v, t).unwrap();
        v
    };
    let same = served
        .iter()
        .zip(&batch)
        .filter(|(a, b)| bytes(std::slice::from_ref(a)) == bytes(std::slice::from_ref(b)))
        .count();
    let steps: usize = served.iter().map(|t| t.steps.len()).sum();
    outcome(
        served.len() == 50 && same == 50,
        format!("{same}/50 session transcripts byte-identical to batch episodes ({steps} steps, engine {})", config.token()),
    )
}

fn main() {
    let start = Instant::now();
    let mut results = Vec::new();
    let worlds: Vec<World> = SEEDS.iter().map(|s| World::build(*s)).collect();
    println!(
        "worlds for seeds {SEEDS:?} ready [{:.1}s]",
        start.elapsed().as_secs_f64()
    );
    let task1: Vec<OperatingPoint> = worlds.iter().map(World::task1).collect();
    let w0 = &worlds[0];

    criterion("exhaustive-limit exactness", &mut results, || {
        exhaustive_exactness(w0)
    });
    criterion("value-estimation oracle", &mut results, || value_oracle(w0));
    criterion("ordering benefit", &mut results, || ordering(&worlds));
    criterion("calibration contract", &mut results, || {
        calibration(&worlds, &task1)
    });
    criterion("reduction with bounded loss", &mut results, || {
        reduction(w0, &task1[0])
    });
    criterion("personalization", &mut results, || {
        personalization(w0, &task1[0])
    });
    criterion("gradient correctness", &mut results, gradient_check);
    criterion("drop-off simulator", &mut results, || {
        dropoff(w0, &task1[0])
    });
    criterion("CLI determinism", &mut results, cli_determinism);
    criterion("service/engine equivalence", &mut results, || {
        service_equivalence(w0)
    });

    let passed = results.iter().filter(|p| **p).count();
    println!(
        "{passed}/{} acceptance criteria passed [{:.1}s]",
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if passed != results.len() {
        std::process::exit(1);
    }
}
