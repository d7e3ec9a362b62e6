//! Interactive input acquisition for multi-modal classifiers.
//!
//! A trained classifier is wrapped so that, case by case, inputs (images and
//! metadata answers) are requested one at a time in order of estimated
//! value, and acquisition stops once no remaining input is worth its
//! calibrated threshold.

pub mod baselines;
pub mod calibrate;
pub mod case;
pub mod classifier;
pub mod distribution;
pub mod divergence;
pub mod dropoff;
pub mod engine;
pub mod error;
pub mod eval;
mod float_serde;
pub mod rng;
pub mod schema;
pub mod synthdata;

pub use case::{pool_image_embeddings, Case, ImageRecord, Severity};
pub use classifier::{Classifier, Fusion, ModelConfig, TrainedModel};
pub use distribution::PredictiveDistribution;
pub use divergence::MetricKind;
pub use error::{Error, Result};
pub use schema::{
    encode_metadata, AnswerValue, Answers, FieldId, FieldKind, FieldSpec, MetadataSchema, ViewType,
};
