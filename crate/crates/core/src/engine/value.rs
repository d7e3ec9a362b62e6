use std::cmp::Ordering;

use super::ivm::ImageValueModel;
use super::state::AcquisitionState;
use super::{Action, Candidate, CandidateValue, EngineConfig, StopReason};
use crate::classifier::Classifier;
use crate::divergence::MetricKind;
use crate::error::{Error, Result};
use crate::schema::{FieldSpec, MetadataSchema, ViewType};

/// Mean distance between the current prediction and the prediction under
/// each hypothetical answer to `field` (all options plus Unknown for
/// categorical fields; the stored 10/50/90th percentiles for scalars).
pub fn estimate_metadata_value(
    state: &AcquisitionState,
    field: &FieldSpec,
    model: &dyn Classifier,
    schema: &MetadataSchema,
    metric: MetricKind,
) -> Result<f64> {
    metadata_value(state, field, model, schema, metric, false)
}

fn metadata_value(
    state: &AcquisitionState,
    field: &FieldSpec,
    model: &dyn Classifier,
    schema: &MetadataSchema,
    metric: MetricKind,
    reverse: bool,
) -> Result<f64> {
    if state.answers().contains_key(&field.id) {
        return Err(Error::Precondition(format!(
            "field {} already acquired",
            field.id
        )));
    }
    if state.images().is_empty() {
        return Err(Error::Precondition(
            "value estimation needs at least one image".into(),
        ));
    }
    let images = state.image_slices();
    let current = state.prediction();
    let branches = field.kind.hypothetical_answers();
    let mut answers = state.answers().clone();
    let mut total = 0.0;
    for answer in &branches {
        answers.insert(field.id, *answer);
        let new = model.predict(&images, &answers, schema)?;
        total += if reverse {
            metric.distance(&new, current)?
        } else {
            metric.distance(current, &new)?
        };
    }
    Ok(total / branches.len() as f64)
}

/// Image value model output for requesting another image of `view`
/// (`None` = any view).
pub fn estimate_image_value(
    state: &AcquisitionState,
    view: Option<ViewType>,
    ivm: &ImageValueModel,
) -> f64 {
    ivm.predict(
        state.prediction(),
        &state.held_images(),
        state.answers().len(),
        view,
    )
}

/// Bundles everything a decision needs.
#[derive(Clone, Copy)]
pub struct Engine<'a> {
    pub model: &'a dyn Classifier,
    pub schema: &'a MetadataSchema,
    pub ivm: Option<&'a ImageValueModel>,
    pub config: &'a EngineConfig,
}

impl<'a> Engine<'a> {
    pub fn new(
        model: &'a dyn Classifier,
        schema: &'a MetadataSchema,
        ivm: Option<&'a ImageValueModel>,
        config: &'a EngineConfig,
    ) -> Self {
        Engine {
            model,
            schema,
            ivm,
            config,
        }
    }

    /// Candidates in canonical order: unanswered fields by id, then image
    /// requests (one per view in instruction mode). Images are offered only
    /// when one can be supplied and an image value model is present.
    pub fn candidates(&self, state: &AcquisitionState, image_available: bool) -> Vec<Candidate> {
        let mut c: Vec<Candidate> = self
            .schema
            .fields()
            .iter()
            .filter(|f| !state.answers().contains_key(&f.id))
            .map(|f| Candidate::Metadata(f.id))
            .collect();
        if image_available && self.ivm.is_some() {
            if self.config.instruction_mode {
                c.extend(ViewType::ALL.iter().map(|v| Candidate::Image(Some(*v))));
            } else {
                c.push(Candidate::Image(None));
            }
        }
        c
    }

    /// Raw (un-thresholded) value of every candidate.
    pub fn raw_values(
        &self,
        state: &AcquisitionState,
        candidates: &[Candidate],
    ) -> Result<Vec<f64>> {
        candidates
            .iter()
            .map(|c| match c {
                Candidate::Metadata(id) => metadata_value(
                    state,
                    self.schema.field(*id)?,
                    self.model,
                    self.schema,
                    self.config.metric,
                    self.config.kl_reverse && self.config.metric == MetricKind::Kl,
                ),
                Candidate::Image(view) => {
                    let ivm = self.ivm.ok_or_else(|| {
                        Error::Precondition("image candidate without an image value model".into())
                    })?;
                    Ok(estimate_image_value(state, *view, ivm))
                }
            })
            .collect()
    }

    /// Subtracts the per-class threshold and picks the argmax; stops when the
    /// best thresholded value is negative. Ties go to the earlier candidate
    /// in canonical order; equal infinite thresholded values are
    /// disambiguated by the raw value so that `-inf` thresholds still rank
    /// candidates by value.
    pub fn decide(&self, candidates: &[Candidate], raw: &[f64]) -> (Action, Vec<CandidateValue>) {
        let values: Vec<CandidateValue> = candidates
            .iter()
            .zip(raw)
            .map(|(c, r)| {
                let r = if r.is_nan() { f64::NEG_INFINITY } else { *r };
                let t = match c {
                    Candidate::Metadata(_) => self.config.t_meta.0,
                    Candidate::Image(_) => self.config.t_image.0,
                };
                let thresholded = if r == t { 0.0 } else { r - t };
                CandidateValue {
                    candidate: *c,
                    raw: r,
                    thresholded,
                }
            })
            .collect();
        let mut best: Option<&CandidateValue> = None;
        for v in &values {
            let better = match best {
                None => true,
                Some(b) => {
                    let mut ord = v.thresholded.total_cmp(&b.thresholded);
                    if ord == Ordering::Equal && v.thresholded.is_infinite() {
                        ord = v.raw.total_cmp(&b.raw);
                    }
                    ord == Ordering::Greater
                }
            };
            if better {
                best = Some(v);
            }
        }
        let action = match best {
            None => Action::Stop {
                reason: StopReason::InputsExhausted,
            },
            Some(b) if !(b.thresholded >= 0.0) => Action::Stop {
                reason: StopReason::AllValuesBelowThreshold,
            },
            Some(b) => match b.candidate {
                Candidate::Metadata(field_id) => Action::AcquireMetadata { field_id },
                Candidate::Image(view) => Action::AcquireImage { view },
            },
        };
        (action, values)
    }

    /// Chooses the next action for `state`. `image_available` says whether
    /// another image could be supplied.
    pub fn next_action(
        &self,
        state: &AcquisitionState,
        image_available: bool,
    ) -> Result<(Action, Vec<CandidateValue>)> {
        self.next_action_with(state, image_available, |cands| {
            self.raw_values(state, cands)
        })
    }

    pub(crate) fn next_action_with(
        &self,
        state: &AcquisitionState,
        image_available: bool,
        raw: impl FnOnce(&[Candidate]) -> Result<Vec<f64>>,
    ) -> Result<(Action, Vec<CandidateValue>)> {
        if state.images().is_empty() {
            return Err(Error::Precondition(
                "the first image must be acquired before deciding".into(),
            ));
        }
        if self
            .config
            .max_steps
            .is_some_and(|cap| state.steps_taken() >= cap)
        {
            return Ok((
                Action::Stop {
                    reason: StopReason::StepCap,
                },
                Vec::new(),
            ));
        }
        let candidates = self.candidates(state, image_available);
        if candidates.is_empty() {
            return Ok((
                Action::Stop {
                    reason: StopReason::InputsExhausted,
                },
                Vec::new(),
            ));
        }
        let raw = raw(&candidates)?;
        Ok(self.decide(&candidates, &raw))
    }
}
