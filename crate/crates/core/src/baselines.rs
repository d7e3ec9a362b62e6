//! Comparison policies and the uniform policy runner.

use std::fmt;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::case::Case;
use crate::classifier::Classifier;
use crate::divergence::MetricKind;
use crate::engine::episode::{apply_action, open_episode};
use crate::engine::{
    run_episode, Action, Engine, EngineConfig, EpisodeTranscript, ImageValueModel, Opening,
    StopReason,
};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::schema::{Answers, FieldId, MetadataSchema};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Policy {
    Mint {
        config: EngineConfig,
    },
    /// Every field, in a per-case random order.
    Random {
        seed: u64,
    },
    /// Every field, in the order fitted on validation data.
    GlobalStatic,
    /// Images only, in seeded random order, until the top probability
    /// reaches `tau`.
    MspEarlyStop {
        tau: f64,
        seed: u64,
    },
    /// `n_images` opening images (`None` = all), then up to `n_meta` fields
    /// (`None` = all) in value order without early stopping.
    FixedBudget {
        n_meta: Option<usize>,
        n_images: Option<usize>,
        metric: MetricKind,
    },
}

const POLICY_HELP: &str = "allowed policies: mint:<metric>[:t_meta=..][:t_image=..][:instruct][:max_steps=n], \
global, random[:seed=n], msp[:tau=x][:seed=n], fixed[:meta=n|all][:images=n|all][:metric=kl|js|entropy]";

fn parse_kv<'a>(parts: impl Iterator<Item = &'a str>) -> Result<Vec<(&'a str, &'a str)>> {
    parts
        .map(|p| {
            p.split_once('=').ok_or_else(|| {
                Error::Config(format!("expected key=value, got `{p}`; {POLICY_HELP}"))
            })
        })
        .collect()
}

fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value `{v}` for `{k}`")))
}

fn count(k: &str, v: &str) -> Result<Option<usize>> {
    if v == "all" {
        Ok(None)
    } else {
        num(k, v).map(Some)
    }
}

impl std::str::FromStr for Policy {
    type Err = Error;

    fn from_str(token: &str) -> Result<Self> {
        let (head, rest) = token.split_once(':').unwrap_or((token, ""));
        let parts = rest.split(':').filter(|s| !s.is_empty());
        let unknown =
            |k: &str| Error::Config(format!("unknown option `{k}` for `{head}`; {POLICY_HELP}"));
        match head {
            "mint" => Ok(Policy::Mint {
                config: EngineConfig::from_token(rest)?,
            }),
            "global" => {
                if let Some(p) = parts.into_iter().next() {
                    return Err(unknown(p));
                }
                Ok(Policy::GlobalStatic)
            }
            "random" => {
                let mut seed = 0;
                for (k, v) in parse_kv(parts)? {
                    match k {
                        "seed" => seed = num(k, v)?,
                        _ => return Err(unknown(k)),
                    }
                }
                Ok(Policy::Random { seed })
            }
            "msp" => {
                let (mut tau, mut seed) = (0.8, 0);
                for (k, v) in parse_kv(parts)? {
                    match k {
                        "tau" => tau = num(k, v)?,
                        "seed" => seed = num(k, v)?,
                        _ => return Err(unknown(k)),
                    }
                }
                if !(tau >= 0.0) {
                    return Err(Error::Config(format!(
                        "msp tau must be non-negative, got {tau}"
                    )));
                }
                Ok(Policy::MspEarlyStop { tau, seed })
            }
            "fixed" => {
                let (mut n_meta, mut n_images, mut metric) = (None, None, MetricKind::Js);
                for (k, v) in parse_kv(parts)? {
                    match k {
                        "meta" => n_meta = count(k, v)?,
                        "images" => n_images = count(k, v)?,
                        "metric" => metric = v.parse()?,
                        _ => return Err(unknown(k)),
                    }
                }
                Ok(Policy::FixedBudget {
                    n_meta,
                    n_images,
                    metric,
                })
            }
            _ => Err(Error::Config(format!(
                "unknown policy `{head}`; {POLICY_HELP}"
            ))),
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let all = |n: &Option<usize>| n.map_or("all".to_string(), |n| n.to_string());
        match self {
            Policy::Mint { config } => write!(f, "mint:{}", config.token()),
            Policy::Random { seed } => write!(f, "random:seed={seed}"),
            Policy::GlobalStatic => f.write_str("global"),
            Policy::MspEarlyStop { tau, seed } => write!(f, "msp:tau={tau}:seed={seed}"),
            Policy::FixedBudget {
                n_meta,
                n_images,
                metric,
            } => {
                write!(
                    f,
                    "fixed:meta={}:images={}:metric={metric}",
                    all(n_meta),
                    all(n_images)
                )
            }
        }
    }
}

/// Everything a policy may need besides the case.
#[derive(Clone, Copy)]
pub struct PolicyContext<'a> {
    pub model: &'a dyn Classifier,
    pub schema: &'a MetadataSchema,
    pub ivm: Option<&'a ImageValueModel>,
    /// Required by [`Policy::GlobalStatic`].
    pub global_order: Option<&'a [FieldId]>,
    /// Opening for MINT, random and global policies.
    pub opening: Opening,
}

fn run_static(
    case: &Case,
    order: &[FieldId],
    ctx: &PolicyContext<'_>,
) -> Result<EpisodeTranscript> {
    let (mut state, mut steps) = open_episode(case, ctx.opening, ctx.model, ctx.schema)?;
    for &field_id in order {
        steps.push(apply_action(
            case,
            &mut state,
            Action::AcquireMetadata { field_id },
            Vec::new(),
            ctx.model,
            ctx.schema,
        )?);
    }
    let stop = Action::Stop {
        reason: StopReason::InputsExhausted,
    };
    steps.push(apply_action(
        case,
        &mut state,
        stop,
        Vec::new(),
        ctx.model,
        ctx.schema,
    )?);
    Ok(EpisodeTranscript {
        case_id: case.case_id,
        steps,
    })
}

fn run_msp(case: &Case, tau: f64, seed: u64, ctx: &PolicyContext<'_>) -> Result<EpisodeTranscript> {
    let mut order: Vec<usize> = (0..case.images.len()).collect();
    order.shuffle(&mut stream(seed, &format!("msp:{}", case.case_id)));
    let mut shuffled = case.clone();
    shuffled.images = order.iter().map(|&i| case.images[i].clone()).collect();
    let (mut state, mut steps) =
        open_episode(&shuffled, Opening::FirstListed, ctx.model, ctx.schema)?;
    let reason = loop {
        if state.prediction().max_prob() >= tau {
            break StopReason::ConfidenceReached;
        }
        if state.images().len() == shuffled.images.len() {
            break StopReason::InputsExhausted;
        }
        steps.push(apply_action(
            &shuffled,
            &mut state,
            Action::AcquireImage { view: None },
            Vec::new(),
            ctx.model,
            ctx.schema,
        )?);
    };
    steps.push(apply_action(
        &shuffled,
        &mut state,
        Action::Stop { reason },
        Vec::new(),
        ctx.model,
        ctx.schema,
    )?);
    // Report image indices in the original case's numbering.
    for s in &mut steps {
        if let Some(crate::engine::Revealed::Image { index, .. }) = &mut s.revealed {
            *index = order[*index];
        }
    }
    Ok(EpisodeTranscript {
        case_id: case.case_id,
        steps,
    })
}

pub fn run_policy(
    policy: &Policy,
    case: &Case,
    ctx: &PolicyContext<'_>,
) -> Result<EpisodeTranscript> {
    match policy {
        Policy::Mint { config } => {
            let engine = Engine::new(ctx.model, ctx.schema, ctx.ivm, config);
            run_episode(&engine, case, ctx.opening)
        }
        Policy::Random { seed } => {
            let mut order: Vec<FieldId> = ctx.schema.fields().iter().map(|f| f.id).collect();
            order.shuffle(&mut stream(*seed, &format!("random:{}", case.case_id)));
            run_static(case, &order, ctx)
        }
        Policy::GlobalStatic => {
            let order = ctx.global_order.ok_or_else(|| {
                Error::Precondition("the global policy needs a fitted field order".into())
            })?;
            run_static(case, order, ctx)
        }
        Policy::MspEarlyStop { tau, seed } => run_msp(case, *tau, *seed, ctx),
        Policy::FixedBudget {
            n_meta,
            n_images,
            metric,
        } => {
            let config = EngineConfig {
                max_steps: *n_meta,
                ..EngineConfig::exhaustive(*metric)
            };
            let engine = Engine::new(ctx.model, ctx.schema, None, &config);
            let opening = n_images.map_or(Opening::AllImages, |n| Opening::FirstN { n });
            run_episode(&engine, case, opening)
        }
    }
}

/// Runs a policy over many cases in parallel; output order follows `cases`.
pub fn run_policy_all(
    policy: &Policy,
    cases: &[Case],
    ctx: &PolicyContext<'_>,
) -> Result<Vec<EpisodeTranscript>> {
    cases
        .par_iter()
        .map(|c| run_policy(policy, c, ctx))
        .collect()
}

/// Greedy forward selection: each position takes the unchosen field that
/// maximizes validation Top-3 given all images and the chosen prefix. Ties
/// go to the lowest field id.
pub fn fit_global_order(
    cases: &[Case],
    model: &dyn Classifier,
    schema: &MetadataSchema,
) -> Result<Vec<FieldId>> {
    if cases.is_empty() {
        return Err(Error::Precondition(
            "fitting a global order needs validation cases".into(),
        ));
    }
    let mut chosen: Vec<FieldId> = Vec::new();
    let mut remaining: Vec<FieldId> = schema.fields().iter().map(|f| f.id).collect();
    while !remaining.is_empty() {
        let scores: Vec<usize> = remaining
            .iter()
            .map(|&cand| {
                cases
                    .par_iter()
                    .map(|case| {
                        let images: Vec<&[f64]> =
                            case.images.iter().map(|i| i.embedding.as_slice()).collect();
                        let answers: Answers = chosen
                            .iter()
                            .chain(std::iter::once(&cand))
                            .map(|&f| (f, case.metadata[f]))
                            .collect();
                        Ok(model
                            .predict(&images, &answers, schema)?
                            .in_top_k(case.label, 3) as usize)
                    })
                    .sum::<Result<usize>>()
            })
            .collect::<Result<_>>()?;
        let mut best = 0;
        for (i, s) in scores.iter().enumerate() {
            if *s > scores[best] {
                best = i;
            }
        }
        chosen.push(remaining.remove(best));
    }
    Ok(chosen)
}
