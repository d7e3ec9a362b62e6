//! Monte Carlo simulation of users abandoning the submission flow.
//!
//! Each metadata screen a transcript touches drops the case once with its
//! screen probability; each acquired image drops it with a per-image
//! probability chosen so that the nominal number of images compounds to the
//! images-screen probability. Uniform draws are keyed by (seed, sim, case)
//! so two transcript sets are compared under common random numbers.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::EpisodeTranscript;
use crate::error::{Error, Result};
use crate::rng::{stream, StreamRng};
use crate::schema::MetadataSchema;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Screen {
    pub screen_id: usize,
    pub p_drop: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImagesScreen {
    pub p_drop: f64,
    pub n_images_nominal: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowModel {
    pub screens: Vec<Screen>,
    pub images_screen: ImagesScreen,
}

impl FlowModel {
    /// Every screen of `schema` at 0.01 and the images screen at 0.02.
    pub fn default_for(schema: &MetadataSchema) -> Self {
        Self::uniform(schema, 0.01, 0.02)
    }

    pub fn uniform(schema: &MetadataSchema, p_screen: f64, p_images: f64) -> Self {
        FlowModel {
            screens: schema
                .screens()
                .into_iter()
                .map(|screen_id| Screen {
                    screen_id,
                    p_drop: p_screen,
                })
                .collect(),
            images_screen: ImagesScreen {
                p_drop: p_images,
                n_images_nominal: 3,
            },
        }
    }

    pub fn validate(&self, schema: &MetadataSchema) -> Result<()> {
        let ok = |p: f64| (0.0..=1.0).contains(&p);
        let mut seen = BTreeSet::new();
        for s in &self.screens {
            if !ok(s.p_drop) {
                return Err(Error::Config(format!(
                    "screen {} p_drop {} is outside [0, 1]",
                    s.screen_id, s.p_drop
                )));
            }
            if !seen.insert(s.screen_id) {
                return Err(Error::Config(format!(
                    "screen {} listed twice",
                    s.screen_id
                )));
            }
        }
        if !ok(self.images_screen.p_drop) {
            return Err(Error::Config(format!(
                "images p_drop {} is outside [0, 1]",
                self.images_screen.p_drop
            )));
        }
        if self.images_screen.n_images_nominal == 0 {
            return Err(Error::Config("n_images_nominal must be at least 1".into()));
        }
        for f in schema.fields() {
            if !seen.contains(&f.screen_id) {
                return Err(Error::Config(format!(
                    "field `{}` is on screen {} which the flow lacks",
                    f.name, f.screen_id
                )));
            }
        }
        Ok(())
    }

    /// Drop probability per acquired image.
    pub fn per_image_p_drop(&self) -> f64 {
        let p = self.images_screen.p_drop;
        if p >= 1.0 {
            return 1.0;
        }
        1.0 - (1.0 - p).powf(1.0 / self.images_screen.n_images_nominal as f64)
    }
}

/// Mean with a 2.5/97.5 percentile interval over simulations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Estimate {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Estimate {
                mean: 0.0,
                lo: 0.0,
                hi: 0.0,
            };
        }
        let mut v = xs.to_vec();
        v.sort_by(f64::total_cmp);
        let at = |q: f64| {
            let pos = q * (v.len() - 1) as f64;
            let (i, frac) = (pos.floor() as usize, pos.fract());
            if i + 1 < v.len() {
                v[i] + frac * (v[i + 1] - v[i])
            } else {
                v[i]
            }
        };
        Estimate {
            mean: xs.iter().sum::<f64>() / xs.len() as f64,
            lo: at(0.025),
            hi: at(0.975),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimOutcome {
    pub drop_rate: f64,
    pub correct_shown_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoffResult {
    pub n_sims: usize,
    pub drop_rate: Estimate,
    pub correct_shown_rate: Estimate,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_sim: Vec<SimOutcome>,
}

impl DropoffResult {
    pub fn without_traces(mut self) -> Self {
        self.per_sim.clear();
        self
    }
}

/// What a transcript exposes the user to.
#[derive(Clone, Debug, PartialEq, Eq)]
struct Exposure {
    case_id: u64,
    /// Indices into `FlowModel::screens`.
    screens: Vec<usize>,
    n_images: usize,
    correct: bool,
}

fn exposures(
    transcripts: &[EpisodeTranscript],
    flow: &FlowModel,
    schema: &MetadataSchema,
    labels: &[usize],
    k: usize,
) -> Result<Vec<Exposure>> {
    flow.validate(schema)?;
    if transcripts.len() != labels.len() {
        return Err(Error::CaseMismatch(format!(
            "{} transcripts for {} labels",
            transcripts.len(),
            labels.len()
        )));
    }
    let slot: BTreeMap<usize, usize> = flow
        .screens
        .iter()
        .enumerate()
        .map(|(i, s)| (s.screen_id, i))
        .collect();
    transcripts
        .iter()
        .zip(labels)
        .map(|(t, &label)| {
            let mut screens = BTreeSet::new();
            for f in t.fields_asked() {
                screens.insert(slot[&schema.field(f)?.screen_id]);
            }
            Ok(Exposure {
                case_id: t.case_id,
                screens: screens.into_iter().collect(),
                n_images: t.num_images(),
                correct: t.final_prediction().in_top_k(label, k),
            })
        })
        .collect()
}

/// Draws for one (sim, case): one per screen in flow order, then one per
/// image slot. The same prefix is produced regardless of how many image
/// draws are consumed.
fn dropped(seed: u64, sim: usize, e: &Exposure, flow: &FlowModel, q_image: f64) -> bool {
    let mut rng: StreamRng = stream(seed, &format!("dropoff:{sim}:{}", e.case_id));
    let screen_u: Vec<f64> = (0..flow.screens.len())
        .map(|_| rng.random::<f64>())
        .collect();
    let by_screen = e
        .screens
        .iter()
        .any(|&i| screen_u[i] < flow.screens[i].p_drop);
    let by_image = (0..e.n_images).any(|_| rng.random::<f64>() < q_image);
    by_screen || by_image
}

fn run_sims(exp: &[Exposure], flow: &FlowModel, n_sims: usize, seed: u64) -> Vec<SimOutcome> {
    let q = flow.per_image_p_drop();
    let n = exp.len().max(1) as f64;
    (0..n_sims)
        .into_par_iter()
        .map(|sim| {
            let (mut drops, mut correct) = (0usize, 0usize);
            for e in exp {
                if dropped(seed, sim, e, flow, q) {
                    drops += 1;
                } else if e.correct {
                    correct += 1;
                }
            }
            SimOutcome {
                drop_rate: drops as f64 / n,
                correct_shown_rate: correct as f64 / n,
            }
        })
        .collect()
}

fn summarize(per_sim: Vec<SimOutcome>) -> DropoffResult {
    let d: Vec<f64> = per_sim.iter().map(|s| s.drop_rate).collect();
    let c: Vec<f64> = per_sim.iter().map(|s| s.correct_shown_rate).collect();
    DropoffResult {
        n_sims: per_sim.len(),
        drop_rate: Estimate::of(&d),
        correct_shown_rate: Estimate::of(&c),
        per_sim,
    }
}

/// Simulates the flow `n_sims` times; a case counts as correctly shown when
/// it did not drop and its label is in the top `k` of its final prediction.
pub fn simulate(
    transcripts: &[EpisodeTranscript],
    flow: &FlowModel,
    schema: &MetadataSchema,
    n_sims: usize,
    seed: u64,
    labels: &[usize],
    k: usize,
) -> Result<DropoffResult> {
    if n_sims == 0 {
        return Err(Error::Precondition("n_sims must be at least 1".into()));
    }
    let exp = exposures(transcripts, flow, schema, labels, k)?;
    Ok(summarize(run_sims(&exp, flow, n_sims, seed)))
}

/// Drop probability averaged over cases, without simulation.
pub fn expected_drop_rate(
    transcripts: &[EpisodeTranscript],
    flow: &FlowModel,
    schema: &MetadataSchema,
) -> Result<f64> {
    let labels = vec![0; transcripts.len()];
    let exp = exposures(transcripts, flow, schema, &labels, 1)?;
    if exp.is_empty() {
        return Ok(0.0);
    }
    let q = flow.per_image_p_drop();
    let total: f64 = exp
        .iter()
        .map(|e| {
            let keep: f64 = e
                .screens
                .iter()
                .map(|&i| 1.0 - flow.screens[i].p_drop)
                .product();
            1.0 - keep * (1.0 - q).powi(e.n_images as i32)
        })
        .sum();
    Ok(total / exp.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub mint: DropoffResult,
    pub full: DropoffResult,
    /// MINT minus full, paired per simulation.
    pub delta_drop_rate: Estimate,
    pub delta_correct_shown_rate: Estimate,
    /// Whether every MINT case touched a subset of its full counterpart's
    /// screens and no more images.
    pub subset_exposure: bool,
    /// Simulations where MINT dropped more cases than full.
    pub dominance_violations: usize,
}

/// Paired comparison under common random numbers.
pub fn compare(
    mint: &[EpisodeTranscript],
    full: &[EpisodeTranscript],
    flow: &FlowModel,
    schema: &MetadataSchema,
    n_sims: usize,
    seed: u64,
    labels: &[usize],
    k: usize,
) -> Result<Comparison> {
    if n_sims == 0 {
        return Err(Error::Precondition("n_sims must be at least 1".into()));
    }
    if mint.len() != full.len() || mint.iter().zip(full).any(|(a, b)| a.case_id != b.case_id) {
        return Err(Error::CaseMismatch(
            "both transcript sets must cover the same cases in the same order".into(),
        ));
    }
    let em = exposures(mint, flow, schema, labels, k)?;
    let ef = exposures(full, flow, schema, labels, k)?;
    let subset_exposure = em
        .iter()
        .zip(&ef)
        .all(|(m, f)| m.n_images <= f.n_images && m.screens.iter().all(|s| f.screens.contains(s)));
    let sm = run_sims(&em, flow, n_sims, seed);
    let sf = run_sims(&ef, flow, n_sims, seed);
    let dd: Vec<f64> = sm
        .iter()
        .zip(&sf)
        .map(|(a, b)| a.drop_rate - b.drop_rate)
        .collect();
    let dc: Vec<f64> = sm
        .iter()
        .zip(&sf)
        .map(|(a, b)| a.correct_shown_rate - b.correct_shown_rate)
        .collect();
    Ok(Comparison {
        dominance_violations: dd.iter().filter(|d| **d > 0.0).count(),
        delta_drop_rate: Estimate::of(&dd),
        delta_correct_shown_rate: Estimate::of(&dc),
        mint: summarize(sm),
        full: summarize(sf),
        subset_exposure,
    })
}
