use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{Action, CandidateValue, StopReason};
use crate::distribution::PredictiveDistribution;
use crate::error::{Error, Result};
use crate::schema::{AnswerValue, FieldId, ViewType};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Revealed {
    Image {
        index: usize,
        view: ViewType,
        /// The requested view was unavailable and another image was used.
        substituted: bool,
    },
    Answer {
        field_id: FieldId,
        value: AnswerValue,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    /// Opening acquisitions happen before any decision is made.
    pub opening: bool,
    pub n_images_before: usize,
    pub n_meta_before: usize,
    /// Every candidate considered at this step, in canonical order.
    pub values: Vec<CandidateValue>,
    pub action: Action,
    pub revealed: Option<Revealed>,
    /// Prediction after this step's acquisition (unchanged for a stop).
    pub prediction: PredictiveDistribution,
}

/// Complete record of one case's acquisition; the last step is always a stop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTranscript {
    pub case_id: u64,
    pub steps: Vec<Step>,
}

impl EpisodeTranscript {
    pub fn final_prediction(&self) -> &PredictiveDistribution {
        &self
            .steps
            .last()
            .expect("transcripts always end with a stop")
            .prediction
    }

    pub fn stop_reason(&self) -> Option<StopReason> {
        match self.steps.last()?.action {
            Action::Stop { reason } => Some(reason),
            _ => None,
        }
    }

    /// Acquisitions chosen after the opening.
    pub fn interactions(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| !s.opening && s.revealed.is_some())
            .count()
    }

    pub fn num_images(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| matches!(s.revealed, Some(Revealed::Image { .. })))
            .count()
    }

    pub fn num_metadata(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| matches!(s.revealed, Some(Revealed::Answer { .. })))
            .count()
    }

    pub fn num_inputs(&self) -> usize {
        self.num_images() + self.num_metadata()
    }

    /// Fields in the order they were asked.
    pub fn fields_asked(&self) -> Vec<FieldId> {
        self.steps
            .iter()
            .filter_map(|s| match s.revealed {
                Some(Revealed::Answer { field_id, .. }) => Some(field_id),
                _ => None,
            })
            .collect()
    }

    /// Entry `n` is the prediction after `n` acquisitions beyond the opening.
    pub fn predictions_by_interaction(&self) -> Vec<&PredictiveDistribution> {
        let opening = self.steps.iter().take_while(|s| s.opening).count();
        let mut out = vec![&self.steps[opening.max(1) - 1].prediction];
        out.extend(
            self.steps[opening..]
                .iter()
                .filter(|s| s.revealed.is_some())
                .map(|s| &s.prediction),
        );
        out
    }
}

#[derive(Serialize, Deserialize)]
struct Line<'a> {
    case_id: u64,
    step: usize,
    #[serde(flatten)]
    body: std::borrow::Cow<'a, Step>,
}

/// One JSON object per step, tagged with the case id and step index.
pub fn write_transcripts_jsonl<W: Write>(
    mut w: W,
    transcripts: &[EpisodeTranscript],
) -> Result<()> {
    for t in transcripts {
        for (i, s) in t.steps.iter().enumerate() {
            serde_json::to_writer(
                &mut w,
                &Line {
                    case_id: t.case_id,
                    step: i,
                    body: std::borrow::Cow::Borrowed(s),
                },
            )?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn read_transcripts_jsonl<R: BufRead>(r: R) -> Result<Vec<EpisodeTranscript>> {
    let mut out: Vec<EpisodeTranscript> = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let l: Line = serde_json::from_str(&line)?;
        let continues = out
            .last()
            .is_some_and(|t| t.case_id == l.case_id && t.steps.len() == l.step);
        if continues {
            out.last_mut().unwrap().steps.push(l.body.into_owned());
        } else if l.step == 0 {
            out.push(EpisodeTranscript {
                case_id: l.case_id,
                steps: vec![l.body.into_owned()],
            });
        } else {
            return Err(Error::Config(format!(
                "line {}: step {} of case {} is out of order",
                n + 1,
                l.step,
                l.case_id
            )));
        }
    }
    Ok(out)
}
