//! Threshold calibration on validation data.
//!
//! Task 1 maximizes the number of withheld inputs subject to a bound on the
//! accuracy drop; Task 2 minimizes the accuracy drop subject to a required
//! number of withheld inputs. Both sweep a threshold grid, reusing cached raw
//! values per case.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::PolicyContext;
use crate::case::Case;
use crate::classifier::Classifier;
use crate::engine::{
    run_episode, run_episode_cached, Candidate, Engine, EngineConfig, EpisodeTranscript, Opening,
    Threshold, ValueCache,
};
use crate::error::{Error, Result};
use crate::eval::{mean, median};
use crate::schema::{Answers, MetadataSchema};

/// Default metadata-threshold axis: both infinite anchors and 11 values
/// log-spaced over [1e-4, 1].
pub fn default_meta_axis() -> Vec<f64> {
    let mut v = vec![f64::NEG_INFINITY];
    v.extend((0..11).map(|i| 10f64.powf(-4.0 + 0.4 * i as f64)));
    v.push(f64::INFINITY);
    v
}

/// Default image-threshold axis. Image values are predicted loss changes
/// and may be negative, so the axis covers a signed range.
pub fn default_image_axis() -> Vec<f64> {
    vec![
        f64::NEG_INFINITY,
        -0.05,
        0.0,
        0.01,
        0.02,
        0.05,
        0.1,
        0.2,
        0.3,
        0.5,
        1.0,
        2.0,
        f64::INFINITY,
    ]
}

/// Metadata-threshold axis fitted to the values the engine actually sees:
/// both infinite anchors around `n` quantiles of the best finite metadata
/// value per decision, taken from exhaustive episodes on `cases`.
pub fn quantile_meta_axis(
    cases: &[Case],
    ctx: &PolicyContext<'_>,
    base: &EngineConfig,
    n: usize,
) -> Result<Vec<f64>> {
    let config = EngineConfig {
        t_meta: Threshold(f64::NEG_INFINITY),
        t_image: Threshold(f64::NEG_INFINITY),
        max_steps: None,
        ..base.clone()
    };
    let engine = Engine::new(ctx.model, ctx.schema, ctx.ivm, &config);
    let per_case: Vec<Vec<f64>> = cases
        .par_iter()
        .map(|case| {
            let t = run_episode(&engine, case, ctx.opening)?;
            Ok(t.steps
                .iter()
                .filter_map(|s| {
                    s.values
                        .iter()
                        .filter(|v| {
                            matches!(v.candidate, Candidate::Metadata(_)) && v.raw.is_finite()
                        })
                        .map(|v| v.raw)
                        .max_by(f64::total_cmp)
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut values: Vec<f64> = per_case.into_iter().flatten().collect();
    if values.is_empty() {
        return Err(Error::Precondition(
            "no metadata decisions to fit a threshold axis on".into(),
        ));
    }
    values.sort_by(f64::total_cmp);
    let mut axis = vec![f64::NEG_INFINITY];
    for i in 1..=n {
        let q = values[(i * (values.len() - 1)) / (n + 1)];
        if axis.last() != Some(&q) {
            axis.push(q);
        }
    }
    axis.push(f64::INFINITY);
    Ok(axis)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdGrid {
    #[serde(with = "crate::float_serde::vec")]
    pub t_meta: Vec<f64>,
    #[serde(with = "crate::float_serde::vec")]
    pub t_image: Vec<f64>,
}

impl Default for ThresholdGrid {
    fn default() -> Self {
        ThresholdGrid {
            t_meta: default_meta_axis(),
            t_image: default_image_axis(),
        }
    }
}

impl ThresholdGrid {
    /// Grid over metadata thresholds only, for settings without image
    /// decisions.
    pub fn meta_only(t_meta: Vec<f64>) -> Self {
        ThresholdGrid {
            t_meta,
            t_image: vec![f64::INFINITY],
        }
    }

    /// Points in grid-index order: metadata axis outer, image axis inner.
    pub fn points(&self) -> Vec<(f64, f64)> {
        self.t_meta
            .iter()
            .flat_map(|m| self.t_image.iter().map(move |i| (*m, *i)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_meta.is_empty() || self.t_image.is_empty() {
            return Err(Error::Config("threshold grid must not be empty".into()));
        }
        if self.t_meta.iter().chain(&self.t_image).any(|t| t.is_nan()) {
            return Err(Error::Config("threshold grid contains NaN".into()));
        }
        Ok(())
    }
}

/// How the performance change in O2 is measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerformanceLoss {
    /// |Top-3(all inputs) - Top-3(acquired)| over the whole set.
    #[default]
    Top3Aggregate,
    /// Mean over cases of |CE(all inputs) - CE(acquired)|.
    CrossEntropyPerCase,
}

/// Predictions with every input, the reference for both objectives.
#[derive(Clone, Debug, PartialEq)]
pub struct FullInputResults {
    pub case_ids: Vec<u64>,
    pub labels: Vec<usize>,
    pub top3_hits: Vec<bool>,
    pub cross_entropy: Vec<f64>,
    pub num_inputs: Vec<usize>,
}

impl FullInputResults {
    pub fn compute(
        cases: &[Case],
        model: &dyn Classifier,
        schema: &MetadataSchema,
    ) -> Result<Self> {
        let preds: Vec<_> = cases
            .par_iter()
            .map(|c| {
                let images: Vec<&[f64]> = c.images.iter().map(|i| i.embedding.as_slice()).collect();
                let answers: Answers = schema
                    .fields()
                    .iter()
                    .map(|f| (f.id, c.metadata[f.id]))
                    .collect();
                model.predict(&images, &answers, schema)
            })
            .collect::<Result<_>>()?;
        Ok(FullInputResults {
            case_ids: cases.iter().map(|c| c.case_id).collect(),
            labels: cases.iter().map(|c| c.label).collect(),
            top3_hits: preds
                .iter()
                .zip(cases)
                .map(|(p, c)| p.in_top_k(c.label, 3))
                .collect(),
            cross_entropy: preds
                .iter()
                .zip(cases)
                .map(|(p, c)| p.cross_entropy(c.label))
                .collect(),
            num_inputs: cases.iter().map(|c| c.num_inputs()).collect(),
        })
    }

    pub fn top3(&self) -> f64 {
        self.top3_hits.iter().filter(|h| **h).count() as f64 / self.top3_hits.len().max(1) as f64
    }

    pub fn mean_inputs(&self) -> f64 {
        mean(
            &self
                .num_inputs
                .iter()
                .map(|n| *n as f64)
                .collect::<Vec<_>>(),
        )
    }
}

/// Per-case outcome of one episode, enough to aggregate every statistic.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeSummary {
    pub inputs: usize,
    pub images: usize,
    pub metadata: usize,
    pub interactions: usize,
    pub top3_hit: bool,
    pub cross_entropy: f64,
}

impl EpisodeSummary {
    pub fn of(t: &EpisodeTranscript, label: usize) -> Self {
        let p = t.final_prediction();
        EpisodeSummary {
            inputs: t.num_inputs(),
            images: t.num_images(),
            metadata: t.num_metadata(),
            interactions: t.interactions(),
            top3_hit: p.in_top_k(label, 3),
            cross_entropy: p.cross_entropy(label),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Achieved {
    pub top3_accuracy: f64,
    pub mean_inputs_acquired: f64,
    pub mean_meta: f64,
    pub mean_images: f64,
    pub median_interactions: f64,
    pub mean_interactions: f64,
    pub o1: f64,
    pub o2: f64,
    /// O1 relative to the mean number of available inputs.
    pub reduction_fraction: f64,
}

/// O1 and O2 from per-case summaries; fails when the case sets differ.
pub fn objectives_from_summaries(
    summaries: &[EpisodeSummary],
    full: &FullInputResults,
    loss: PerformanceLoss,
) -> Result<Achieved> {
    if summaries.len() != full.labels.len() {
        return Err(Error::CaseMismatch(format!(
            "{} episodes for {} reference cases",
            summaries.len(),
            full.labels.len()
        )));
    }
    let f = |g: &dyn Fn(&EpisodeSummary) -> f64| mean(&summaries.iter().map(g).collect::<Vec<_>>());
    let top3 = f(&|s| s.top3_hit as u8 as f64);
    let acquired = f(&|s| s.inputs as f64);
    let available = full.mean_inputs();
    let o1 = available - acquired;
    let o2 = match loss {
        PerformanceLoss::Top3Aggregate => (full.top3() - top3).abs(),
        PerformanceLoss::CrossEntropyPerCase => mean(
            &summaries
                .iter()
                .zip(&full.cross_entropy)
                .map(|(s, ce)| (ce - s.cross_entropy).abs())
                .collect::<Vec<_>>(),
        ),
    };
    Ok(Achieved {
        top3_accuracy: top3,
        mean_inputs_acquired: acquired,
        mean_meta: f(&|s| s.metadata as f64),
        mean_images: f(&|s| s.images as f64),
        median_interactions: median(
            &summaries
                .iter()
                .map(|s| s.interactions as f64)
                .collect::<Vec<_>>(),
        ),
        mean_interactions: f(&|s| s.interactions as f64),
        o1,
        o2,
        reduction_fraction: if available > 0.0 { o1 / available } else { 0.0 },
    })
}

/// O1 and O2 of a transcript set against full-input results.
pub fn evaluate_objectives(
    transcripts: &[EpisodeTranscript],
    full: &FullInputResults,
    loss: PerformanceLoss,
) -> Result<(f64, f64)> {
    if transcripts.len() != full.case_ids.len()
        || transcripts
            .iter()
            .zip(&full.case_ids)
            .any(|(t, id)| t.case_id != *id)
    {
        return Err(Error::CaseMismatch(
            "transcripts and full-input results cover different cases".into(),
        ));
    }
    let s: Vec<EpisodeSummary> = transcripts
        .iter()
        .zip(&full.labels)
        .map(|(t, l)| EpisodeSummary::of(t, *l))
        .collect();
    let a = objectives_from_summaries(&s, full, loss)?;
    Ok((a.o1, a.o2))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Task {
    /// Maximize O1 subject to O2 <= epsilon2.
    Task1 { epsilon2: f64 },
    /// Minimize O2 subject to O1 >= epsilon1.
    Task2 { epsilon1: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub index: usize,
    pub t_meta: Threshold,
    pub t_image: Threshold,
    pub achieved: Achieved,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub t_meta: Threshold,
    pub t_image: Threshold,
    pub achieved: Achieved,
    pub task: Task,
}

impl OperatingPoint {
    /// The engine configuration at this point, on top of `base`.
    pub fn engine_config(&self, base: &EngineConfig) -> EngineConfig {
        EngineConfig {
            t_meta: self.t_meta,
            t_image: self.t_image,
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub base: EngineConfig,
    pub opening: Opening,
    pub loss: PerformanceLoss,
    pub grid: ThresholdGrid,
    pub full_input_top3: f64,
    pub points: Vec<GridPoint>,
    pub chosen: Option<OperatingPoint>,
}

/// Evaluates every grid point on `cases`. Episodes of one case run
/// sequentially over the grid sharing a value cache; cases run in parallel.
pub fn sweep(
    cases: &[Case],
    ctx: &PolicyContext<'_>,
    base: &EngineConfig,
    grid: &ThresholdGrid,
    loss: PerformanceLoss,
) -> Result<CalibrationReport> {
    grid.validate()?;
    let points = grid.points();
    let full = FullInputResults::compute(cases, ctx.model, ctx.schema)?;
    let per_case: Vec<Vec<EpisodeSummary>> = cases
        .par_iter()
        .map(|case| {
            let mut cache = ValueCache::new(case.case_id, base.metric, base.kl_reverse);
            points
                .iter()
                .map(|(m, i)| {
                    let config = EngineConfig {
                        t_meta: Threshold(*m),
                        t_image: Threshold(*i),
                        ..base.clone()
                    };
                    let engine = Engine::new(ctx.model, ctx.schema, ctx.ivm, &config);
                    let t = run_episode_cached(&engine, case, ctx.opening, &mut cache)?;
                    Ok(EpisodeSummary::of(&t, case.label))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let points = points
        .iter()
        .enumerate()
        .map(|(index, (m, i))| {
            let s: Vec<EpisodeSummary> = per_case.iter().map(|v| v[index]).collect();
            Ok(GridPoint {
                index,
                t_meta: Threshold(*m),
                t_image: Threshold(*i),
                achieved: objectives_from_summaries(&s, &full, loss)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(CalibrationReport {
        base: base.clone(),
        opening: ctx.opening,
        loss,
        grid: grid.clone(),
        full_input_top3: full.top3(),
        points,
        chosen: None,
    })
}

/// Picks the operating point for `task` from evaluated grid points.
pub fn select(points: &[GridPoint], task: Task) -> Result<OperatingPoint> {
    let better = |a: &GridPoint, b: &GridPoint| -> bool {
        let (x, y) = (&a.achieved, &b.achieved);
        match task {
            Task::Task1 { .. } => {
                x.o1 > y.o1 || (x.o1 == y.o1 && x.median_interactions < y.median_interactions)
            }
            Task::Task2 { .. } => x.o2 < y.o2 || (x.o2 == y.o2 && x.o1 > y.o1),
        }
    };
    let feasible = |p: &GridPoint| match task {
        Task::Task1 { epsilon2 } => p.achieved.o2 <= epsilon2,
        Task::Task2 { epsilon1 } => p.achieved.o1 >= epsilon1,
    };
    let mut best: Option<&GridPoint> = None;
    for p in points.iter().filter(|p| feasible(p)) {
        if best.is_none_or(|b| better(p, b)) {
            best = Some(p);
        }
    }
    match best {
        Some(p) => Ok(OperatingPoint {
            t_meta: p.t_meta,
            t_image: p.t_image,
            achieved: p.achieved.clone(),
            task,
        }),
        None => Err(match task {
            Task::Task1 { .. } => Error::Infeasible {
                objective: "O2",
                best: points
                    .iter()
                    .map(|p| p.achieved.o2)
                    .fold(f64::INFINITY, f64::min),
            },
            Task::Task2 { .. } => Error::Infeasible {
                objective: "O1",
                best: points
                    .iter()
                    .map(|p| p.achieved.o1)
                    .fold(f64::NEG_INFINITY, f64::max),
            },
        }),
    }
}

fn check_epsilon(task: Task) -> Result<()> {
    let e = match task {
        Task::Task1 { epsilon2 } => epsilon2,
        Task::Task2 { epsilon1 } => epsilon1,
    };
    if !(e >= 0.0) {
        return Err(Error::Config(format!(
            "epsilon must be non-negative, got {e}"
        )));
    }
    Ok(())
}

/// Sweeps the grid and selects the point for `task`. The report is returned
/// even when the task is infeasible, alongside the error.
pub fn calibrate(
    cases: &[Case],
    ctx: &PolicyContext<'_>,
    base: &EngineConfig,
    grid: &ThresholdGrid,
    loss: PerformanceLoss,
    task: Task,
) -> (Result<OperatingPoint>, Option<CalibrationReport>) {
    if let Err(e) = check_epsilon(task) {
        return (Err(e), None);
    }
    match sweep(cases, ctx, base, grid, loss) {
        Err(e) => (Err(e), None),
        Ok(mut report) => {
            let chosen = select(&report.points, task);
            report.chosen = chosen.as_ref().ok().cloned();
            (chosen, Some(report))
        }
    }
}

pub fn calibrate_task1(
    cases: &[Case],
    ctx: &PolicyContext<'_>,
    base: &EngineConfig,
    epsilon2: f64,
    grid: &ThresholdGrid,
) -> Result<OperatingPoint> {
    calibrate(
        cases,
        ctx,
        base,
        grid,
        PerformanceLoss::default(),
        Task::Task1 { epsilon2 },
    )
    .0
}

pub fn calibrate_task2(
    cases: &[Case],
    ctx: &PolicyContext<'_>,
    base: &EngineConfig,
    epsilon1: f64,
    grid: &ThresholdGrid,
) -> Result<OperatingPoint> {
    calibrate(
        cases,
        ctx,
        base,
        grid,
        PerformanceLoss::default(),
        Task::Task2 { epsilon1 },
    )
    .0
}

/// Max-probability trajectory of one case under the MSP image order.
fn msp_trajectory(case: &Case, seed: u64, ctx: &PolicyContext<'_>) -> Result<Vec<f64>> {
    let t = crate::baselines::run_policy(
        &crate::baselines::Policy::MspEarlyStop {
            tau: f64::INFINITY,
            seed,
        },
        case,
        ctx,
    )?;
    Ok(t.predictions_by_interaction()
        .iter()
        .map(|p| p.max_prob())
        .collect())
}

fn msp_images(traj: &[f64], tau: f64) -> usize {
    traj.iter()
        .position(|p| *p >= tau)
        .map_or(traj.len(), |i| i + 1)
}

/// Finds the MSP confidence target whose mean image count on `cases` is
/// within 0.1 of `target_mean_images`. Returns `(tau, mean_images)`.
pub fn fit_msp_tau(
    cases: &[Case],
    ctx: &PolicyContext<'_>,
    target_mean_images: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    if cases.is_empty() {
        return Err(Error::Precondition("fitting tau needs cases".into()));
    }
    let trajs: Vec<Vec<f64>> = cases
        .par_iter()
        .map(|c| msp_trajectory(c, seed, ctx))
        .collect::<Result<_>>()?;
    let mean_at = |tau: f64| {
        mean(
            &trajs
                .iter()
                .map(|t| msp_images(t, tau) as f64)
                .collect::<Vec<_>>(),
        )
    };
    let close = |m: f64| (m - target_mean_images).abs() <= 0.1;
    for tau in [0.0, 1.0] {
        let m = mean_at(tau);
        if close(m) {
            return Ok((tau, m));
        }
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let m = mean_at(mid);
        if close(m) {
            return Ok((mid, m));
        }
        if m < target_mean_images {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Infeasible {
        objective: "mean_images",
        best: mean_at(0.5 * (lo + hi)),
    })
}
