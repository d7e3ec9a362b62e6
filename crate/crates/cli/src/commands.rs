use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use mint_core::baselines::{fit_global_order, run_policy_all, Policy, PolicyContext};
use mint_core::calibrate::{
    calibrate as run_calibration, default_image_axis, default_meta_axis, quantile_meta_axis, sweep,
    Achieved, CalibrationReport, FullInputResults, OperatingPoint, PerformanceLoss, Task,
    ThresholdGrid,
};
use mint_core::classifier::train as train_model;
use mint_core::dropoff::{compare, expected_drop_rate, simulate, FlowModel};
use mint_core::engine::{
    read_transcripts_jsonl, train_image_value_model, write_transcripts_jsonl, Action, EngineConfig,
    EpisodeTranscript, Opening, Revealed,
};
use mint_core::eval::{
    final_accuracy, histogram_variance, input_histogram, interaction_curve, mean, median, InputKind,
};
use mint_core::synthdata::{generate, GeneratorConfig};
use mint_core::{AnswerValue, FieldKind, MetadataSchema, ModelConfig};
use serde::{Deserialize, Serialize};

use crate::artifacts::{config_error, read_config, Dataset, Model, Run};
use crate::{Common, Inputs, TaskArg};

fn no_config(c: &Common, command: &str) -> Result<()> {
    match &c.config {
        Some(_) => Err(config_error(format!("{command} takes no --config"))),
        None => Ok(()),
    }
}

fn engine_token(token: &str) -> Result<EngineConfig> {
    EngineConfig::from_token(token).map_err(|e| config_error(e.to_string()))
}

pub fn gen_data(c: &Common) -> Result<()> {
    let mut config: GeneratorConfig = match &c.config {
        Some(p) => read_config(p)?,
        None => GeneratorConfig::default(),
    };
    if let Some(seed) = c.seed {
        config.seed = seed;
    }
    config.validate().map_err(|e| config_error(e.to_string()))?;
    let mut run = Run::new("gen-data", config.seed, &c.out)?;
    run.set_config(&config)?;
    let data = generate(&config)?;
    run.write_json("generator.json", &config)?;
    run.write_json("schema.json", &data.schema)?;
    for (name, cases) in [
        ("train.jsonl", &data.train),
        ("val.jsonl", &data.val),
        ("test.jsonl", &data.test),
    ] {
        let mut bytes = Vec::new();
        mint_core::case::write_cases_jsonl(&mut bytes, cases, &data.schema)?;
        run.write(name, &bytes)?;
    }
    tracing::info!(
        train = data.train.len(),
        val = data.val.len(),
        test = data.test.len(),
        "dataset written"
    );
    run.finish()
}

pub fn train(c: &Common, data_dir: &Path, fit_image_value: bool) -> Result<()> {
    let mut config: ModelConfig = match &c.config {
        Some(p) => read_config(p)?,
        None => ModelConfig::default(),
    };
    if let Some(seed) = c.seed {
        config.seed = seed;
    }
    let mut run = Run::new("train", config.seed, &c.out)?;
    let data = Dataset::load(&mut run, data_dir)?;
    config.num_classes = data.num_classes();
    config.embedding_dim = data
        .train
        .first()
        .map(|c| c.embedding_dim())
        .ok_or_else(|| config_error("the training split is empty"))?;
    config.validate().map_err(|e| config_error(e.to_string()))?;
    run.set_config(&config)?;
    let (model, report) = train_model(&data.train, &data.val, &data.schema, &config)?;
    tracing::info!(
        step = report.selected_step,
        loss = report.final_loss,
        "model trained"
    );
    run.write("model.json", &serde_json::to_vec(&model)?)?;
    run.write_json("train_report.json", &report)?;
    if fit_image_value {
        let ivm = train_image_value_model(&model, &data.val, &data.schema, config.seed)?;
        tracing::info!(rows = ivm.training_rows, "image value model fitted");
        run.write_json("image_value.json", &ivm)?;
    }
    run.finish()
}

/// Contents of `cal.json`.
#[derive(Serialize, Deserialize)]
pub struct CalFile {
    pub task: Task,
    /// Engine token at the chosen point (absent when infeasible).
    pub engine: Option<String>,
    pub opening: Opening,
    pub chosen: Option<OperatingPoint>,
    /// The chosen point re-evaluated on the test split.
    pub test: Option<Achieved>,
    pub report: CalibrationReport,
}

pub struct CalibrateArgs {
    pub task: TaskArg,
    pub epsilon: f64,
    pub data: PathBuf,
    pub model: PathBuf,
    pub engine: String,
    pub grid: Option<String>,
    pub inputs: Option<Inputs>,
}

pub fn calibrate(c: &Common, a: CalibrateArgs) -> Result<()> {
    let base = engine_token(&a.engine)?;
    let task = match a.task {
        TaskArg::Task1 => Task::Task1 {
            epsilon2: a.epsilon,
        },
        TaskArg::Task2 => Task::Task2 {
            epsilon1: a.epsilon,
        },
    };
    let inputs = a.inputs.unwrap_or(match a.task {
        TaskArg::Task1 => Inputs::Full,
        TaskArg::Task2 => Inputs::MetaOnly,
    });
    let grid_token = a.grid.clone().unwrap_or_else(|| {
        match a.task {
            TaskArg::Task1 => "default",
            TaskArg::Task2 => "quantile:59",
        }
        .to_string()
    });
    let mut run = Run::new("calibrate", c.seed.unwrap_or(0), &c.out)?;
    let data = Dataset::load(&mut run, &a.data)?;
    let m = Model::load(&mut run, &a.model, &data.schema)?;
    let (ivm, opening) = match inputs {
        Inputs::Full => (m.ivm.as_ref(), Opening::FirstListed),
        Inputs::MetaOnly => (None, Opening::AllImages),
    };
    if ivm.is_none() && matches!(inputs, Inputs::Full) {
        tracing::warn!("no image value model; only metadata will be acquired");
    }
    let ctx = PolicyContext {
        model: &m.model,
        schema: &data.schema,
        ivm,
        global_order: None,
        opening,
    };
    let grid = match &c.config {
        Some(p) => read_config::<ThresholdGrid>(p)?,
        None => {
            let t_meta = match grid_token.as_str() {
                "default" => default_meta_axis(),
                g => {
                    let n = g
                        .strip_prefix("quantile:")
                        .and_then(|n| n.parse::<usize>().ok())
                        .ok_or_else(|| {
                            config_error(format!("bad grid `{g}` (expected default or quantile:N)"))
                        })?;
                    quantile_meta_axis(&data.val, &ctx, &base, n)?
                }
            };
            match inputs {
                Inputs::Full => ThresholdGrid {
                    t_meta,
                    t_image: default_image_axis(),
                },
                Inputs::MetaOnly => ThresholdGrid::meta_only(t_meta),
            }
        }
    };
    grid.validate().map_err(|e| config_error(e.to_string()))?;
    run.set_config(&serde_json::json!({
        "task": task,
        "inputs": format!("{inputs:?}"),
        "engine": base.token(),
        "grid": grid,
    }))?;
    let loss = PerformanceLoss::default();
    let (chosen, report) = run_calibration(&data.val, &ctx, &base, &grid, loss, task);
    let Some(report) = report else {
        let e = chosen
            .err()
            .expect("a chosen point always comes with a report");
        return Err(config_error(e.to_string()));
    };
    let point = chosen.as_ref().ok().cloned();
    let test = match &point {
        Some(p) => {
            let single = ThresholdGrid {
                t_meta: vec![p.t_meta.0],
                t_image: vec![p.t_image.0],
            };
            let r = sweep(&data.test, &ctx, &base, &single, loss)?;
            Some(r.points[0].achieved.clone())
        }
        None => None,
    };
    let file = CalFile {
        task,
        engine: point.as_ref().map(|p| p.engine_config(&base).token()),
        opening,
        chosen: point,
        test,
        report,
    };
    run.write_json("cal.json", &file)?;
    run.finish()?;
    let p = chosen.context("calibration is infeasible")?;
    tracing::info!(
        t_meta = %p.t_meta,
        t_image = %p.t_image,
        o1 = p.achieved.o1,
        o2 = p.achieved.o2,
        "operating point chosen"
    );
    Ok(())
}

fn load_cal(run: &mut Run, spec: &str) -> Result<CalFile> {
    let path = spec.strip_prefix("from:").ok_or_else(|| {
        config_error(format!(
            "thresholds must be `from:<cal.json>`, got `{spec}`"
        ))
    })?;
    let cal: CalFile = run.read_json(Path::new(path))?;
    if cal.chosen.is_none() {
        return Err(config_error(format!(
            "{path} holds no feasible operating point"
        )));
    }
    Ok(cal)
}

fn explicit_thresholds(token: &str) -> bool {
    token.contains("t_meta=") || token.contains("t_image=")
}

/// Applies calibrated thresholds to a mint policy that sets none.
fn with_calibration(token: &str, policy: Policy, cal: &CalFile) -> Result<Policy> {
    let Policy::Mint { config } = policy else {
        return Ok(policy);
    };
    if explicit_thresholds(token) {
        return Ok(Policy::Mint { config });
    }
    let point = cal.chosen.as_ref().expect("checked on load");
    if cal.report.base.metric != config.metric {
        return Err(config_error(format!(
            "thresholds were calibrated for {} but `{token}` uses {}",
            cal.report.base.metric, config.metric
        )));
    }
    Ok(Policy::Mint {
        config: point.engine_config(&config),
    })
}

#[derive(Serialize)]
struct CurveRow<'a> {
    policy: &'a str,
    n_interactions: usize,
    top_k: f64,
    n_cases_contributing: usize,
}

#[derive(Serialize)]
struct HistRow<'a> {
    policy: &'a str,
    kind: &'a str,
    count: usize,
    cases: usize,
}

#[derive(Serialize)]
struct PolicyStats {
    policy: String,
    transcripts: String,
    top1: f64,
    top_k: f64,
    top3: f64,
    auc: f64,
    mean_inputs: f64,
    mean_images: f64,
    mean_metadata: f64,
    mean_interactions: f64,
    median_interactions: f64,
    input_variance: f64,
    occupied_buckets: usize,
    /// Fraction of available inputs not acquired.
    reduction: f64,
    /// Full-input Top-3 minus this policy's Top-3.
    top3_drop: f64,
}

#[derive(Serialize)]
struct EvalStats {
    split: String,
    k: usize,
    n_cases: usize,
    opening: Opening,
    full_input_top3: f64,
    mean_available_inputs: f64,
    policies: Vec<PolicyStats>,
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?)
}

pub fn eval(
    c: &Common,
    data_dir: &Path,
    model_dir: &Path,
    tokens: &[String],
    thresholds: Option<&str>,
    split: &str,
    k: usize,
) -> Result<()> {
    no_config(c, "eval")?;
    let mut run = Run::new("eval", c.seed.unwrap_or(0), &c.out)?;
    let data = Dataset::load(&mut run, data_dir)?;
    let m = Model::load(&mut run, model_dir, &data.schema)?;
    let cal = thresholds.map(|t| load_cal(&mut run, t)).transpose()?;
    let mut policies = Vec::new();
    for t in tokens {
        let p: Policy = t
            .parse()
            .map_err(|e: mint_core::Error| config_error(e.to_string()))?;
        policies.push(match &cal {
            Some(cal) => with_calibration(t, p, cal)?,
            None => p,
        });
    }
    let cases = data.split(split)?;
    if cases.is_empty() {
        return Err(config_error(format!("split `{split}` is empty")));
    }
    let opening = cal.as_ref().map_or(Opening::FirstListed, |c| c.opening);
    let global_order = if policies.iter().any(|p| matches!(p, Policy::GlobalStatic)) {
        Some(fit_global_order(&data.val, &m.model, &data.schema)?)
    } else {
        None
    };
    let ctx = PolicyContext {
        model: &m.model,
        schema: &data.schema,
        ivm: m.ivm.as_ref(),
        global_order: global_order.as_deref(),
        opening,
    };
    run.set_config(&serde_json::json!({
        "policies": policies.iter().map(|p| p.to_string()).collect::<Vec<_>>(),
        "split": split,
        "k": k,
        "opening": opening,
        "global_order": global_order,
    }))?;
    let full = FullInputResults::compute(cases, &m.model, &data.schema)?;
    let labels: Vec<usize> = cases.iter().map(|c| c.label).collect();
    let mut curve_rows = Vec::new();
    let mut hist_rows = Vec::new();
    let mut stats = Vec::new();
    let names: Vec<String> = policies.iter().map(|p| p.to_string()).collect();
    for (i, (policy, name)) in policies.iter().zip(&names).enumerate() {
        let transcripts = run_policy_all(policy, cases, &ctx)?;
        let file = format!("transcripts-{i}.jsonl");
        let mut bytes = Vec::new();
        write_transcripts_jsonl(&mut bytes, &transcripts)?;
        run.write(&file, &bytes)?;
        let curve = interaction_curve(&transcripts, &labels, k)?;
        for p in &curve.points {
            curve_rows.push(CurveRow {
                policy: name,
                n_interactions: p.n_interactions,
                top_k: p.top_k,
                n_cases_contributing: p.n_cases_contributing,
            });
        }
        for (kind, label) in [
            (InputKind::Total, "total"),
            (InputKind::Images, "images"),
            (InputKind::Metadata, "metadata"),
        ] {
            for (count, cases) in input_histogram(&transcripts, kind) {
                hist_rows.push(HistRow {
                    policy: name,
                    kind: label,
                    count,
                    cases,
                });
            }
        }
        let total = input_histogram(&transcripts, InputKind::Total);
        let per = |f: fn(&EpisodeTranscript) -> usize| -> Vec<f64> {
            transcripts.iter().map(|t| f(t) as f64).collect()
        };
        let top3 = final_accuracy(&transcripts, &labels, 3)?;
        let mean_inputs = mean(&per(EpisodeTranscript::num_inputs));
        stats.push(PolicyStats {
            policy: name.clone(),
            transcripts: file,
            top1: final_accuracy(&transcripts, &labels, 1)?,
            top_k: final_accuracy(&transcripts, &labels, k)?,
            top3,
            auc: curve.auc,
            mean_inputs,
            mean_images: mean(&per(EpisodeTranscript::num_images)),
            mean_metadata: mean(&per(EpisodeTranscript::num_metadata)),
            mean_interactions: mean(&per(EpisodeTranscript::interactions)),
            median_interactions: median(&per(EpisodeTranscript::interactions)),
            input_variance: histogram_variance(&total),
            occupied_buckets: total.len(),
            reduction: 1.0 - mean_inputs / full.mean_inputs(),
            top3_drop: full.top3() - top3,
        });
        tracing::info!(policy = %name, top3, mean_inputs, "policy evaluated");
    }
    run.write("curve.csv", &to_csv(&curve_rows)?)?;
    run.write("hist.csv", &to_csv(&hist_rows)?)?;
    run.write_json(
        "stats.json",
        &EvalStats {
            split: split.to_string(),
            k,
            n_cases: cases.len(),
            opening,
            full_input_top3: full.top3(),
            mean_available_inputs: full.mean_inputs(),
            policies: stats,
        },
    )?;
    run.finish()
}

fn read_transcripts(run: &mut Run, path: &Path) -> Result<Vec<EpisodeTranscript>> {
    let bytes = run.read(path)?;
    read_transcripts_jsonl(BufReader::new(bytes.as_slice()))
        .with_context(|| format!("parsing {}", path.display()))
}

fn labels_for(data: &Dataset, transcripts: &[EpisodeTranscript]) -> Result<Vec<usize>> {
    let by_id: HashMap<u64, usize> = data.all_cases().map(|c| (c.case_id, c.label)).collect();
    transcripts
        .iter()
        .map(|t| {
            by_id
                .get(&t.case_id)
                .copied()
                .ok_or_else(|| config_error(format!("case {} is not in the dataset", t.case_id)))
        })
        .collect()
}

pub fn dropoff(
    c: &Common,
    data_dir: &Path,
    transcripts: &Path,
    against: Option<&Path>,
    n_sims: usize,
    k: usize,
) -> Result<()> {
    let seed = c.seed.unwrap_or(0);
    let mut run = Run::new("dropoff", seed, &c.out)?;
    let data = Dataset::load(&mut run, data_dir)?;
    let flow = match &c.config {
        Some(p) => read_config::<FlowModel>(p)?,
        None => FlowModel::default_for(&data.schema),
    };
    flow.validate(&data.schema)
        .map_err(|e| config_error(e.to_string()))?;
    if n_sims == 0 {
        return Err(config_error("--n-sims must be at least 1"));
    }
    run.set_config(&serde_json::json!({ "flow": flow, "n_sims": n_sims, "k": k }))?;
    let mint = read_transcripts(&mut run, transcripts)?;
    let labels = labels_for(&data, &mint)?;
    let expected = expected_drop_rate(&mint, &flow, &data.schema)?;
    let body = match against {
        None => {
            let r = simulate(&mint, &flow, &data.schema, n_sims, seed, &labels, k)?;
            serde_json::json!({
                "expected_drop_rate": expected,
                "result": r.without_traces(),
            })
        }
        Some(other) => {
            let full = read_transcripts(&mut run, other)?;
            let mut cmp = compare(&mint, &full, &flow, &data.schema, n_sims, seed, &labels, k)?;
            cmp.mint = cmp.mint.without_traces();
            cmp.full = cmp.full.without_traces();
            serde_json::json!({
                "expected_drop_rate": expected,
                "expected_drop_rate_against": expected_drop_rate(&full, &flow, &data.schema)?,
                "comparison": cmp,
            })
        }
    };
    run.write_json("dropoff.json", &body)?;
    run.finish()
}

#[allow(clippy::too_many_arguments)]
pub fn serve(
    c: &Common,
    data_dir: &Path,
    model_dir: &Path,
    addr: std::net::SocketAddr,
    engine: Option<&str>,
    thresholds: Option<&str>,
    static_dir: Option<PathBuf>,
    ttl_minutes: u64,
    split: &str,
) -> Result<()> {
    let mut run = Run::read_only("serve");
    let data = Dataset::load(&mut run, data_dir)?;
    let m = Model::load(&mut run, model_dir, &data.schema)?;
    let mut default_engine = match (&c.config, engine) {
        (Some(_), Some(_)) => return Err(config_error("give either --config or --engine")),
        (Some(p), None) => read_config::<EngineConfig>(p)?,
        (None, Some(t)) => engine_token(t)?,
        (None, None) => EngineConfig::default(),
    };
    if let Some(spec) = thresholds {
        let cal = load_cal(&mut run, spec)?;
        default_engine = cal.chosen.as_ref().unwrap().engine_config(&default_engine);
    }
    let cases = data.split(split)?.to_vec();
    let mut res = mint_service::Resources::new(m.model, data.schema, m.ivm, cases)?;
    res.default_engine = default_engine;
    if let Some(g) = &data.generator {
        res.live_image_cap = g.max_images;
    }
    let state = mint_service::AppState::new(res, Duration::from_secs(ttl_minutes * 60));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(mint_service::serve(addr, state, static_dir))?;
    Ok(())
}

fn describe_answer(schema: Option<&MetadataSchema>, field: usize, value: &AnswerValue) -> String {
    let spec = schema.and_then(|s| s.field(field).ok());
    let name = spec.map_or(format!("field {field}"), |f| f.name.clone());
    let shown = match (value, spec.map(|f| &f.kind)) {
        (AnswerValue::Categorical(i), Some(FieldKind::Categorical { cardinality, .. }))
            if *i == *cardinality =>
        {
            "unknown".to_string()
        }
        (AnswerValue::Categorical(i), Some(FieldKind::Categorical { options, .. })) => options
            .get(*i)
            .cloned()
            .unwrap_or_else(|| format!("option {i}")),
        (AnswerValue::Categorical(i), _) => format!("option {i}"),
        (AnswerValue::Scalar(x), _) => format!("{x}"),
        (AnswerValue::ScalarUnknown, _) => "unknown".to_string(),
    };
    format!("{name} = {shown}")
}

/// Text rendering of one transcript.
pub fn render(
    t: &EpisodeTranscript,
    schema: Option<&MetadataSchema>,
    label: Option<usize>,
) -> String {
    let mut s = String::new();
    let _ = write!(s, "case {}", t.case_id);
    if let Some(l) = label {
        let _ = write!(s, " (label {l})");
    }
    s.push('\n');
    let mut n = 0;
    for step in &t.steps {
        let tag = if step.opening {
            "open".to_string()
        } else if step.revealed.is_some() {
            n += 1;
            n.to_string()
        } else {
            "end".to_string()
        };
        let what = match (&step.revealed, &step.action) {
            (
                Some(Revealed::Image {
                    index,
                    view,
                    substituted,
                }),
                _,
            ) => {
                format!(
                    "image #{index} ({view}{})",
                    if *substituted { ", substituted" } else { "" }
                )
            }
            (Some(Revealed::Answer { field_id, value }), _) => {
                format!("ask {}", describe_answer(schema, *field_id, value))
            }
            (None, Action::Stop { reason }) => {
                format!(
                    "stop: {}",
                    serde_json::to_value(reason)
                        .unwrap()
                        .as_str()
                        .unwrap_or("?")
                )
            }
            (None, a) => format!("{a:?}"),
        };
        let p = &step.prediction;
        let top: Vec<String> = p
            .top_k(3)
            .iter()
            .map(|c| format!("{c} ({:.3})", p.probs()[*c]))
            .collect();
        let _ = write!(s, "  [{tag:>4}] {what:<40} top3: {}", top.join(", "));
        if let Some(best) = step
            .values
            .iter()
            .max_by(|a, b| a.thresholded.total_cmp(&b.thresholded))
        {
            let _ = write!(
                s,
                "  best value {:.4} (net {:.4})",
                best.raw, best.thresholded
            );
        }
        s.push('\n');
    }
    s
}

pub fn replay(
    c: &Common,
    transcripts: &Path,
    data_dir: Option<&Path>,
    case: Option<u64>,
) -> Result<()> {
    no_config(c, "replay")?;
    let mut run = Run::read_only("replay");
    let data = data_dir.map(|d| Dataset::load(&mut run, d)).transpose()?;
    let ts = read_transcripts(&mut run, transcripts)?;
    let labels: HashMap<u64, usize> = data
        .iter()
        .flat_map(|d| d.all_cases().map(|c| (c.case_id, c.label)))
        .collect();
    let mut shown = 0;
    for t in ts.iter().filter(|t| case.is_none_or(|id| t.case_id == id)) {
        print!(
            "{}",
            render(
                t,
                data.as_ref().map(|d| &d.schema),
                labels.get(&t.case_id).copied()
            )
        );
        shown += 1;
    }
    if shown == 0 {
        return Err(config_error(match case {
            Some(id) => format!("no transcript for case {id}"),
            None => "no transcripts".to_string(),
        }));
    }
    Ok(())
}
