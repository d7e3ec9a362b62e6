//! The acquisition engine: value estimation for every remaining input,
//! thresholded argmax selection, and whole-episode simulation.
//!
//! Estimators return *raw* values; thresholds are only subtracted when a
//! decision is made, so calibration can sweep thresholds over cached values.

pub(crate) mod episode;
mod ivm;
mod state;
mod transcript;
mod value;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::divergence::MetricKind;
use crate::error::{Error, Result};
use crate::schema::{FieldId, ViewType};

pub use episode::{reveal_image, run_episode, run_episode_cached, Opening, Stepper, ValueCache};
pub use ivm::{
    image_features, image_value_pairs, train_image_value_model, ImageValueModel, FEATURE_WIDTH,
};
pub use state::{AcquiredImage, AcquisitionState};
pub use transcript::{
    read_transcripts_jsonl, write_transcripts_jsonl, EpisodeTranscript, Revealed, Step,
};
pub use value::{estimate_image_value, estimate_metadata_value, Engine};

/// A value threshold; may be ±∞ (serialized as `"inf"` / `"-inf"`).
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Threshold(#[serde(with = "crate::float_serde")] pub f64);

impl Threshold {
    pub const ACQUIRE_ALL: Threshold = Threshold(f64::NEG_INFINITY);
    pub const NEVER: Threshold = Threshold(f64::INFINITY);

    pub fn value(self) -> f64 {
        self.0
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 == f64::INFINITY {
            f.write_str("inf")
        } else if self.0 == f64::NEG_INFINITY {
            f.write_str("-inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl std::str::FromStr for Threshold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let v = crate::float_serde::parse(s).map_err(Error::Config)?;
        if v.is_nan() {
            return Err(Error::Config("threshold must not be NaN".into()));
        }
        Ok(Threshold(v))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    /// Metadata before images, then lowest field id, then view order.
    #[default]
    LowestFieldId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub metric: MetricKind,
    pub t_meta: Threshold,
    pub t_image: Threshold,
    /// Value each view type separately and request the best one.
    pub instruction_mode: bool,
    pub tie_break: TieBreak,
    /// Cap on acquisitions after the opening image(s).
    pub max_steps: Option<usize>,
    /// Score metadata with KL(p_new ‖ p_current) instead of KL(p_current ‖ p_new).
    pub kl_reverse: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            metric: MetricKind::Js,
            t_meta: Threshold(0.063),
            t_image: Threshold(0.1),
            instruction_mode: false,
            tie_break: TieBreak::LowestFieldId,
            max_steps: None,
            kl_reverse: false,
        }
    }
}

impl EngineConfig {
    pub fn with_thresholds(metric: MetricKind, t_meta: f64, t_image: f64) -> Self {
        EngineConfig {
            metric,
            t_meta: Threshold(t_meta),
            t_image: Threshold(t_image),
            ..Default::default()
        }
    }

    /// Acquires everything, ordered by value.
    pub fn exhaustive(metric: MetricKind) -> Self {
        Self::with_thresholds(metric, f64::NEG_INFINITY, f64::NEG_INFINITY)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_meta.0.is_nan() || self.t_image.0.is_nan() {
            return Err(Error::Config("thresholds must not be NaN".into()));
        }
        Ok(())
    }

    /// Parses `metric[:key=value]*`, e.g. `js:t_meta=0.02:t_image=0.05:instruct`.
    pub fn from_token(token: &str) -> Result<Self> {
        let mut parts = token.split(':');
        let metric: MetricKind = parts.next().unwrap_or_default().parse()?;
        let mut config = EngineConfig {
            metric,
            ..Default::default()
        };
        for part in parts {
            let (k, v) = part.split_once('=').unwrap_or((part, ""));
            match k {
                "t_meta" => config.t_meta = v.parse()?,
                "t_image" => config.t_image = v.parse()?,
                "instruct" => config.instruction_mode = v.is_empty() || v == "true",
                "max_steps" => {
                    config.max_steps =
                        Some(v.parse().map_err(|_| Error::Config(format!("bad max_steps `{v}`")))?)
                }
                "kl_reverse" => config.kl_reverse = v.is_empty() || v == "true",
                _ => {
                    return Err(Error::Config(format!(
                        "unknown engine option `{k}` (allowed: t_meta, t_image, instruct, max_steps, kl_reverse)"
                    )))
                }
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn token(&self) -> String {
        let mut s = format!(
            "{}:t_meta={}:t_image={}",
            self.metric, self.t_meta, self.t_image
        );
        if self.instruction_mode {
            s.push_str(":instruct");
        }
        if let Some(m) = self.max_steps {
            s.push_str(&format!(":max_steps={m}"));
        }
        if self.kl_reverse {
            s.push_str(":kl_reverse");
        }
        s
    }
}

/// An input the engine could request next.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Candidate {
    Metadata(FieldId),
    /// `None` is the "any further image" token used outside instruction mode.
    Image(Option<ViewType>),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateValue {
    pub candidate: Candidate,
    #[serde(with = "crate::float_serde")]
    pub raw: f64,
    #[serde(with = "crate::float_serde")]
    pub thresholded: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    AllValuesBelowThreshold,
    InputsExhausted,
    StepCap,
    /// Maximum softmax probability reached the baseline's confidence target.
    ConfidenceReached,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Action {
    AcquireMetadata { field_id: FieldId },
    AcquireImage { view: Option<ViewType> },
    Stop { reason: StopReason },
}

impl Action {
    pub fn is_stop(&self) -> bool {
        matches!(self, Action::Stop { .. })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn engine_tokens_round_trip() {
        let c =
            EngineConfig::from_token("kl:t_meta=-inf:t_image=0.25:instruct:max_steps=3").unwrap();
        assert_eq!(c.metric, MetricKind::Kl);
        assert_eq!(c.t_meta, Threshold::ACQUIRE_ALL);
        assert!(c.instruction_mode);
        assert_eq!(c.max_steps, Some(3));
        assert_eq!(EngineConfig::from_token(&c.token()).unwrap(), c);
    }

    #[test]
    fn bad_engine_tokens_list_allowed_options() {
        let err = EngineConfig::from_token("js:speed=3")
            .unwrap_err()
            .to_string();
        assert!(err.contains("t_meta"));
        assert!(EngineConfig::from_token("mi").is_err());
    }

    #[test]
    fn config_json_keeps_infinite_thresholds() {
        let c = EngineConfig::exhaustive(MetricKind::Js);
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"-inf\""));
        assert_eq!(serde_json::from_str::<EngineConfig>(&s).unwrap(), c);
    }
}
