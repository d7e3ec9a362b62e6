use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::state::{AcquiredImage, AcquisitionState};
use super::transcript::{EpisodeTranscript, Revealed, Step};
use super::value::Engine;
use super::{Action, Candidate, CandidateValue};
use crate::case::Case;
use crate::classifier::Classifier;
use crate::divergence::MetricKind;
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::schema::{AnswerValue, FieldId, MetadataSchema, ViewType};

/// Which images are in hand before the first decision.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Opening {
    /// The case's first image.
    #[default]
    FirstListed,
    /// One image chosen uniformly with a per-case seeded stream.
    SeededRandom { seed: u64 },
    /// Every image; only metadata is left to acquire.
    AllImages,
    /// The first `n` images (at least one).
    FirstN { n: usize },
}

impl Opening {
    pub fn indices(&self, case: &Case) -> Vec<usize> {
        let n = case.images.len();
        match *self {
            Opening::FirstListed => vec![0],
            Opening::SeededRandom { seed } => {
                vec![stream(seed, &format!("episode:{}", case.case_id)).random_range(0..n)]
            }
            Opening::AllImages => (0..n).collect(),
            Opening::FirstN { n: k } => (0..k.clamp(1, n)).collect(),
        }
    }
}

/// Picks the next image to hand over for a request: the lowest-index unused
/// image of the requested view, else the lowest-index unused image of any
/// view (flagged as substituted). `None` when every image is used.
pub fn reveal_image(
    case: &Case,
    state: &AcquisitionState,
    view: Option<ViewType>,
) -> Option<(usize, bool)> {
    let unused = |i: &usize| !state.has_image(*i);
    if let Some(v) = view {
        if let Some(i) = (0..case.images.len())
            .filter(unused)
            .find(|&i| case.images[i].view == v)
        {
            return Some((i, false));
        }
    }
    (0..case.images.len())
        .find(unused)
        .map(|i| (i, view.is_some()))
}

/// Raw candidate values of one case, keyed by acquired input set, so that
/// episodes under different thresholds share the expensive estimates.
#[derive(Clone, Debug)]
pub struct ValueCache {
    case_id: u64,
    metric: MetricKind,
    kl_reverse: bool,
    values: HashMap<(Vec<usize>, Vec<FieldId>, Candidate), f64>,
}

impl ValueCache {
    pub fn new(case_id: u64, metric: MetricKind, kl_reverse: bool) -> Self {
        ValueCache {
            case_id,
            metric,
            kl_reverse,
            values: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub(crate) fn open_episode(
    case: &Case,
    opening: Opening,
    model: &dyn Classifier,
    schema: &MetadataSchema,
) -> Result<(AcquisitionState, Vec<Step>)> {
    if case.images.is_empty() {
        return Err(Error::Precondition(format!(
            "case {} has no images",
            case.case_id
        )));
    }
    let mut state: Option<AcquisitionState> = None;
    let mut steps = Vec::new();
    for index in opening.indices(case) {
        let rec = &case.images[index];
        let image = AcquiredImage {
            index,
            requested: None,
            view: rec.view,
            embedding: rec.embedding.clone(),
        };
        let (n_images_before, n_meta_before) = state
            .as_ref()
            .map_or((0, 0), |s| (s.images().len(), s.answers().len()));
        match state.as_mut() {
            None => state = Some(AcquisitionState::new(case.case_id, image, model, schema)?),
            Some(s) => s.add_image(image, false, model, schema)?,
        }
        steps.push(Step {
            opening: true,
            n_images_before,
            n_meta_before,
            values: Vec::new(),
            action: Action::AcquireImage { view: None },
            revealed: Some(Revealed::Image {
                index,
                view: rec.view,
                substituted: false,
            }),
            prediction: state.as_ref().unwrap().prediction().clone(),
        });
    }
    Ok((state.expect("at least one opening image"), steps))
}

/// An input handed over in response to a request.
enum Input {
    Nothing,
    Answer(FieldId, AnswerValue),
    Image(AcquiredImage, bool),
}

fn record(
    state: &mut AcquisitionState,
    action: Action,
    values: Vec<CandidateValue>,
    input: Input,
    model: &dyn Classifier,
    schema: &MetadataSchema,
) -> Result<Step> {
    let n_images_before = state.images().len();
    let n_meta_before = state.answers().len();
    let revealed = match input {
        Input::Nothing => None,
        Input::Answer(field_id, value) => {
            state.add_answer(field_id, value, model, schema)?;
            Some(Revealed::Answer { field_id, value })
        }
        Input::Image(image, substituted) => {
            let (index, view) = (image.index, image.view);
            state.add_image(image, true, model, schema)?;
            Some(Revealed::Image {
                index,
                view,
                substituted,
            })
        }
    };
    Ok(Step {
        opening: false,
        n_images_before,
        n_meta_before,
        values,
        action,
        revealed,
        prediction: state.prediction().clone(),
    })
}

/// Carries out `action` against the case's stored inputs and records it.
pub(crate) fn apply_action(
    case: &Case,
    state: &mut AcquisitionState,
    action: Action,
    values: Vec<CandidateValue>,
    model: &dyn Classifier,
    schema: &MetadataSchema,
) -> Result<Step> {
    let input = match action {
        Action::Stop { .. } => Input::Nothing,
        Action::AcquireMetadata { field_id } => {
            let value = *case.metadata.get(field_id).ok_or_else(|| {
                Error::CaseMismatch(format!("case {} has no field {field_id}", case.case_id))
            })?;
            Input::Answer(field_id, value)
        }
        Action::AcquireImage { view } => {
            let (index, substituted) = reveal_image(case, state, view).ok_or_else(|| {
                Error::Precondition(format!("case {} has no image left", case.case_id))
            })?;
            let rec = &case.images[index];
            let image = AcquiredImage {
                index,
                requested: view,
                view: rec.view,
                embedding: rec.embedding.clone(),
            };
            Input::Image(image, substituted)
        }
    };
    record(state, action, values, input, model, schema)
}

/// An episode advanced one request at a time, with inputs supplied from
/// outside (a stored case, or a person answering). Produces the same steps as
/// [`run_episode`] when every input comes from the case.
#[derive(Clone, Debug)]
pub struct Stepper {
    state: AcquisitionState,
    steps: Vec<Step>,
    pending: Option<(Action, Vec<CandidateValue>)>,
}

impl Stepper {
    /// Starts from a stored case's opening images.
    pub fn open(
        case: &Case,
        opening: Opening,
        model: &dyn Classifier,
        schema: &MetadataSchema,
    ) -> Result<Self> {
        let (state, steps) = open_episode(case, opening, model, schema)?;
        Ok(Stepper {
            state,
            steps,
            pending: None,
        })
    }

    /// Starts from a single uploaded image.
    pub fn open_with_image(
        case_id: u64,
        view: ViewType,
        embedding: Vec<f64>,
        model: &dyn Classifier,
        schema: &MetadataSchema,
    ) -> Result<Self> {
        let image = AcquiredImage {
            index: 0,
            requested: None,
            view,
            embedding,
        };
        let state = AcquisitionState::new(case_id, image, model, schema)?;
        let step = Step {
            opening: true,
            n_images_before: 0,
            n_meta_before: 0,
            values: Vec::new(),
            action: Action::AcquireImage { view: None },
            revealed: Some(Revealed::Image {
                index: 0,
                view,
                substituted: false,
            }),
            prediction: state.prediction().clone(),
        };
        Ok(Stepper {
            state,
            steps: vec![step],
            pending: None,
        })
    }

    pub fn state(&self) -> &AcquisitionState {
        &self.state
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn is_stopped(&self) -> bool {
        self.steps.last().is_some_and(|s| s.action.is_stop())
    }

    /// The request waiting for an input, if any.
    pub fn pending(&self) -> Option<(Action, &[CandidateValue])> {
        self.pending.as_ref().map(|(a, v)| (*a, v.as_slice()))
    }

    /// Decides the next request unless one is already pending. A stop is
    /// recorded immediately and ends the episode.
    pub fn decide(&mut self, engine: &Engine<'_>, image_available: bool) -> Result<Action> {
        self.decide_with(engine, image_available, |state, c| {
            engine.raw_values(state, c)
        })
    }

    fn decide_with(
        &mut self,
        engine: &Engine<'_>,
        image_available: bool,
        raw: impl FnOnce(&AcquisitionState, &[Candidate]) -> Result<Vec<f64>>,
    ) -> Result<Action> {
        if let Some(stop) = self.steps.last().filter(|s| s.action.is_stop()) {
            return Ok(stop.action);
        }
        if let Some((action, _)) = &self.pending {
            return Ok(*action);
        }
        let state = &self.state;
        let (action, values) =
            engine.next_action_with(state, image_available, |c| raw(state, c))?;
        if action.is_stop() {
            let step = record(
                &mut self.state,
                action,
                values,
                Input::Nothing,
                engine.model,
                engine.schema,
            )?;
            self.steps.push(step);
        } else {
            self.pending = Some((action, values));
        }
        Ok(action)
    }

    fn take_pending(&self) -> Result<(Action, Vec<CandidateValue>)> {
        self.pending
            .clone()
            .ok_or_else(|| Error::Precondition("no request is pending".into()))
    }

    fn commit(
        &mut self,
        action: Action,
        values: Vec<CandidateValue>,
        input: Input,
        model: &dyn Classifier,
        schema: &MetadataSchema,
    ) -> Result<&Step> {
        let step = record(&mut self.state, action, values, input, model, schema)?;
        self.pending = None;
        self.steps.push(step);
        Ok(self.steps.last().unwrap())
    }

    /// Answers a pending metadata request. On error nothing changes.
    pub fn answer(
        &mut self,
        value: AnswerValue,
        model: &dyn Classifier,
        schema: &MetadataSchema,
    ) -> Result<&Step> {
        let (action, values) = self.take_pending()?;
        let Action::AcquireMetadata { field_id } = action else {
            return Err(Error::Precondition(
                "the pending request is for an image".into(),
            ));
        };
        schema.check_answer(field_id, &value)?;
        self.commit(
            action,
            values,
            Input::Answer(field_id, value),
            model,
            schema,
        )
    }

    /// Supplies an image for a pending image request. On error nothing changes.
    pub fn supply_image(
        &mut self,
        index: usize,
        view: ViewType,
        embedding: Vec<f64>,
        model: &dyn Classifier,
        schema: &MetadataSchema,
    ) -> Result<&Step> {
        let (action, values) = self.take_pending()?;
        let Action::AcquireImage { view: requested } = action else {
            return Err(Error::Precondition(
                "the pending request is for metadata".into(),
            ));
        };
        let image = AcquiredImage {
            index,
            requested,
            view,
            embedding,
        };
        let substituted = requested.is_some_and(|r| r != view);
        self.commit(
            action,
            values,
            Input::Image(image, substituted),
            model,
            schema,
        )
    }

    /// Satisfies the pending request from the case's stored inputs.
    pub fn supply_from_case(
        &mut self,
        case: &Case,
        model: &dyn Classifier,
        schema: &MetadataSchema,
    ) -> Result<&Step> {
        let (action, values) = self.take_pending()?;
        let step = apply_action(case, &mut self.state, action, values, model, schema)?;
        self.pending = None;
        self.steps.push(step);
        Ok(self.steps.last().unwrap())
    }

    pub fn transcript(&self) -> EpisodeTranscript {
        EpisodeTranscript {
            case_id: self.state.case_id,
            steps: self.steps.clone(),
        }
    }
}

/// Runs the engine on a stored case until it stops.
pub fn run_episode(
    engine: &Engine<'_>,
    case: &Case,
    opening: Opening,
) -> Result<EpisodeTranscript> {
    drive(engine, case, opening, |state, cands| {
        engine.raw_values(state, cands)
    })
}

/// Like [`run_episode`], reusing and filling `cache`.
pub fn run_episode_cached(
    engine: &Engine<'_>,
    case: &Case,
    opening: Opening,
    cache: &mut ValueCache,
) -> Result<EpisodeTranscript> {
    if cache.case_id != case.case_id
        || cache.metric != engine.config.metric
        || cache.kl_reverse != engine.config.kl_reverse
    {
        return Err(Error::Precondition(
            "value cache belongs to another case or metric".into(),
        ));
    }
    drive(engine, case, opening, |state, cands| {
        let (images, fields) = state.key();
        let mut out = Vec::with_capacity(cands.len());
        let mut missing = Vec::new();
        for (i, c) in cands.iter().enumerate() {
            match cache.values.get(&(images.clone(), fields.clone(), *c)) {
                Some(v) => out.push(*v),
                None => {
                    out.push(f64::NAN);
                    missing.push(i);
                }
            }
        }
        if !missing.is_empty() {
            let todo: Vec<Candidate> = missing.iter().map(|&i| cands[i]).collect();
            let fresh = engine.raw_values(state, &todo)?;
            for (&i, v) in missing.iter().zip(fresh) {
                out[i] = v;
                cache
                    .values
                    .insert((images.clone(), fields.clone(), cands[i]), v);
            }
        }
        Ok(out)
    })
}

fn drive(
    engine: &Engine<'_>,
    case: &Case,
    opening: Opening,
    mut raw: impl FnMut(&AcquisitionState, &[Candidate]) -> Result<Vec<f64>>,
) -> Result<EpisodeTranscript> {
    let mut stepper = Stepper::open(case, opening, engine.model, engine.schema)?;
    loop {
        let available = reveal_image(case, &stepper.state, None).is_some();
        if stepper.decide_with(engine, available, &mut raw)?.is_stop() {
            break;
        }
        stepper.supply_from_case(case, engine.model, engine.schema)?;
    }
    Ok(EpisodeTranscript {
        case_id: case.case_id,
        steps: stepper.steps,
    })
}
