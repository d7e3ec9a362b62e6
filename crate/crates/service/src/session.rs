use std::time::{SystemTime, UNIX_EPOCH};

use mint_core::engine::{
    reveal_image, Action, CandidateValue, Engine, EngineConfig, EpisodeTranscript, Opening,
    Stepper, StopReason,
};
use mint_core::{AnswerValue, Case, FieldId, ViewType};
use serde::{Deserialize, Serialize};

use crate::error::ApiError;
use crate::Resources;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Mode {
    /// Bound to a stored case; its first image is acquired on creation.
    Simulated { case_id: u64 },
    /// Inputs come from the client, starting with an uploaded embedding.
    Live,
}

/// Body of `POST /sessions/{id}/answer`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Submission {
    /// Answer to the pending metadata question.
    Metadata { value: AnswerValue },
    /// An uploaded image embedding (live sessions).
    Image { view: ViewType, embedding: Vec<f64> },
    /// One of the bound case's unused images, by index (simulated sessions).
    CaseImage { index: usize },
    /// Whatever the bound case stores for the pending request.
    Auto,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    AwaitingFirstImage,
    AwaitingInput,
    Stopped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedClass {
    pub class: usize,
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pending {
    pub action: Action,
    pub values: Vec<CandidateValue>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldImage {
    pub index: usize,
    pub view: ViewType,
    pub requested: Option<ViewType>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldAnswer {
    pub field_id: FieldId,
    pub name: String,
    pub value: AnswerValue,
}

/// What `GET /sessions/{id}/next` returns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NextView {
    pub status: Status,
    pub top_k: Vec<RankedClass>,
    pub pending: Option<Pending>,
    pub stop_reason: Option<StopReason>,
}

/// Full session state as served by `GET /sessions/{id}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub session_id: String,
    pub mode: Mode,
    pub engine: String,
    pub created_at_ms: u64,
    #[serde(flatten)]
    pub next: NextView,
    pub images: Vec<HeldImage>,
    pub answers: Vec<HeldAnswer>,
    pub transcript: EpisodeTranscript,
}

pub struct Session {
    pub id: String,
    pub mode: Mode,
    pub config: EngineConfig,
    pub created_at_ms: u64,
    stepper: Option<Stepper>,
}

const LIVE_CASE_ID: u64 = 0;

impl Session {
    pub fn create(
        id: String,
        mode: Mode,
        config: EngineConfig,
        res: &Resources,
    ) -> Result<Self, ApiError> {
        let created_at_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as u64);
        let mut s = Session {
            id,
            mode,
            config,
            created_at_ms,
            stepper: None,
        };
        if let Mode::Simulated { case_id } = mode {
            let case = res.case(case_id)?;
            s.stepper = Some(Stepper::open(
                case,
                Opening::FirstListed,
                &res.model,
                &res.schema,
            )?);
            s.advance(res)?;
        }
        Ok(s)
    }

    fn bound_case<'r>(&self, res: &'r Resources) -> Result<Option<&'r Case>, ApiError> {
        match self.mode {
            Mode::Simulated { case_id } => res.case(case_id).map(Some),
            Mode::Live => Ok(None),
        }
    }

    fn advance(&mut self, res: &Resources) -> Result<(), ApiError> {
        let case = self.bound_case(res)?;
        let Some(stepper) = self.stepper.as_mut() else {
            return Ok(());
        };
        let available = match case {
            Some(case) => reveal_image(case, stepper.state(), None).is_some(),
            None => stepper.state().images().len() < res.live_image_cap,
        };
        let engine = Engine::new(&res.model, &res.schema, res.ivm.as_ref(), &self.config);
        stepper.decide(&engine, available)?;
        Ok(())
    }

    pub fn is_stopped(&self) -> bool {
        self.stepper.as_ref().is_some_and(|s| s.is_stopped())
    }

    /// Applies one input. Rejected inputs leave the session unchanged.
    pub fn submit(&mut self, input: Submission, res: &Resources) -> Result<(), ApiError> {
        if self.is_stopped() {
            return Err(ApiError::gone(format!(
                "session {} has stopped; its transcript is still readable",
                self.id
            )));
        }
        let case = self.bound_case(res)?;
        let (model, schema) = (&res.model, &res.schema);
        let Some(stepper) = self.stepper.as_mut() else {
            let Submission::Image { view, embedding } = input else {
                return Err(ApiError::type_mismatch(
                    "the session is waiting for its first image",
                ));
            };
            self.stepper = Some(Stepper::open_with_image(
                LIVE_CASE_ID,
                view,
                embedding,
                model,
                schema,
            )?);
            return self.advance(res);
        };
        let (action, _) = stepper
            .pending()
            .ok_or_else(|| ApiError::internal("no pending request"))?;
        match (action, input, case) {
            (_, Submission::Auto, Some(case)) => {
                stepper.supply_from_case(case, model, schema)?;
            }
            (_, Submission::Auto, None) => {
                return Err(ApiError::bad_request(
                    "auto answers need a simulated session",
                ))
            }
            (Action::AcquireMetadata { .. }, Submission::Metadata { value }, _) => {
                stepper.answer(value, model, schema)?;
            }
            (Action::AcquireImage { .. }, Submission::Image { view, embedding }, None) => {
                let index = stepper.state().images().len();
                stepper.supply_image(index, view, embedding, model, schema)?;
            }
            (Action::AcquireImage { .. }, Submission::CaseImage { index }, Some(case)) => {
                let rec = case.images.get(index).ok_or_else(|| {
                    ApiError::not_found(format!("case {} has no image {index}", case.case_id))
                })?;
                if stepper.state().has_image(index) {
                    return Err(ApiError::type_mismatch(format!(
                        "image {index} is already acquired"
                    )));
                }
                stepper.supply_image(index, rec.view, rec.embedding.clone(), model, schema)?;
            }
            (Action::AcquireImage { .. }, Submission::Image { .. }, Some(_)) => {
                return Err(ApiError::bad_request(
                    "simulated sessions take images from the bound case (use case_image)",
                ))
            }
            (Action::AcquireImage { .. }, Submission::CaseImage { .. }, None) => {
                return Err(ApiError::bad_request(
                    "live sessions have no bound case (use image)",
                ))
            }
            (Action::AcquireImage { .. }, Submission::Metadata { .. }, _) => {
                return Err(ApiError::type_mismatch(
                    "an image was requested, not a metadata answer",
                ))
            }
            (Action::AcquireMetadata { field_id }, _, _) => {
                return Err(ApiError::type_mismatch(format!(
                    "field {field_id} was asked, not an image"
                )))
            }
            (Action::Stop { .. }, _, _) => unreachable!("stops are recorded when decided"),
        }
        self.advance(res)
    }

    pub fn next_view(&self, k: usize) -> NextView {
        let Some(stepper) = &self.stepper else {
            return NextView {
                status: Status::AwaitingFirstImage,
                top_k: Vec::new(),
                pending: Some(Pending {
                    action: Action::AcquireImage { view: None },
                    values: Vec::new(),
                }),
                stop_reason: None,
            };
        };
        let prediction = stepper.state().prediction();
        let top_k = prediction
            .top_k(k)
            .into_iter()
            .map(|class| RankedClass {
                class,
                prob: prediction.probs()[class],
            })
            .collect();
        let stop_reason = match stepper.steps().last().map(|s| s.action) {
            Some(Action::Stop { reason }) => Some(reason),
            _ => None,
        };
        NextView {
            status: if stop_reason.is_some() {
                Status::Stopped
            } else {
                Status::AwaitingInput
            },
            top_k,
            pending: stepper.pending().map(|(action, values)| Pending {
                action,
                values: values.to_vec(),
            }),
            stop_reason,
        }
    }

    pub fn snapshot(&self, res: &Resources) -> Snapshot {
        let (images, answers, transcript) = match &self.stepper {
            None => (
                Vec::new(),
                Vec::new(),
                EpisodeTranscript {
                    case_id: LIVE_CASE_ID,
                    steps: Vec::new(),
                },
            ),
            Some(s) => {
                let mut images: Vec<HeldImage> = s
                    .state()
                    .images()
                    .iter()
                    .map(|im| HeldImage {
                        index: im.index,
                        view: im.view,
                        requested: im.requested,
                    })
                    .collect();
                images.sort_by_key(|im| im.index);
                let answers = s
                    .state()
                    .answers()
                    .iter()
                    .map(|(&field_id, &value)| HeldAnswer {
                        field_id,
                        name: res
                            .schema
                            .field(field_id)
                            .map(|f| f.name.clone())
                            .unwrap_or_default(),
                        value,
                    })
                    .collect();
                (images, answers, s.transcript())
            }
        };
        Snapshot {
            session_id: self.id.clone(),
            mode: self.mode,
            engine: self.config.token(),
            created_at_ms: self.created_at_ms,
            next: self.next_view(res.top_k),
            images,
            answers,
            transcript,
        }
    }
}
