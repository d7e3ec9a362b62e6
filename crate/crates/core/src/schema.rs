//! Metadata schema, answer values and the fixed-width metadata encoding.
//!
//! Categorical fields encode as a one-hot block of width `cardinality + 1`;
//! the last slot of every block is reserved for *Unknown*. Scalar fields
//! encode as their raw value, with the training-set median standing in when
//! the answer is missing.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type FieldId = usize;

/// Partial answer map handed to a classifier: only acquired fields appear.
pub type Answers = BTreeMap<FieldId, AnswerValue>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewType {
    Near,
    Far,
    Other,
}

impl ViewType {
    pub const ALL: [ViewType; 3] = [ViewType::Near, ViewType::Far, ViewType::Other];

    pub fn index(self) -> usize {
        match self {
            ViewType::Near => 0,
            ViewType::Far => 1,
            ViewType::Other => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ViewType::Near => "near",
            ViewType::Far => "far",
            ViewType::Other => "other",
        }
    }
}

impl fmt::Display for ViewType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ViewType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "near" => Ok(ViewType::Near),
            "far" => Ok(ViewType::Far),
            "other" => Ok(ViewType::Other),
            _ => Err(Error::Config(format!(
                "unknown view type `{s}` (expected near|far|other)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerValue {
    /// Option index; `cardinality` itself means Unknown.
    Categorical(usize),
    Scalar(f64),
    ScalarUnknown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum FieldKind {
    Categorical {
        /// Number of real options, not counting Unknown.
        cardinality: usize,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        options: Vec<String>,
    },
    Scalar {
        placeholder: f64,
        p10: f64,
        p50: f64,
        p90: f64,
    },
}

impl FieldKind {
    pub fn categorical(cardinality: usize) -> Self {
        FieldKind::Categorical {
            cardinality,
            options: Vec::new(),
        }
    }

    pub fn scalar(p10: f64, p50: f64, p90: f64) -> Self {
        FieldKind::Scalar {
            placeholder: p50,
            p10,
            p50,
            p90,
        }
    }

    /// Width of this field's block in the encoded vector.
    pub fn width(&self) -> usize {
        match self {
            FieldKind::Categorical { cardinality, .. } => cardinality + 1,
            FieldKind::Scalar { .. } => 1,
        }
    }

    pub fn unknown(&self) -> AnswerValue {
        match self {
            FieldKind::Categorical { cardinality, .. } => AnswerValue::Categorical(*cardinality),
            FieldKind::Scalar { .. } => AnswerValue::ScalarUnknown,
        }
    }

    /// The hypothetical answers value estimation branches over: every option
    /// plus Unknown for categorical fields, the stored percentiles for scalars.
    pub fn hypothetical_answers(&self) -> Vec<AnswerValue> {
        match self {
            FieldKind::Categorical { cardinality, .. } => {
                (0..=*cardinality).map(AnswerValue::Categorical).collect()
            }
            FieldKind::Scalar { p10, p50, p90, .. } => vec![
                AnswerValue::Scalar(*p10),
                AnswerValue::Scalar(*p50),
                AnswerValue::Scalar(*p90),
            ],
        }
    }

    pub fn is_unknown(&self, value: &AnswerValue) -> bool {
        match (self, value) {
            (FieldKind::Categorical { cardinality, .. }, AnswerValue::Categorical(i)) => {
                i == cardinality
            }
            (FieldKind::Scalar { .. }, AnswerValue::ScalarUnknown) => true,
            _ => false,
        }
    }

    fn check(&self, value: &AnswerValue) -> Result<()> {
        match (self, value) {
            (FieldKind::Categorical { cardinality, .. }, AnswerValue::Categorical(i)) => {
                if i > cardinality {
                    Err(Error::Encoding(format!(
                        "categorical index {i} exceeds unknown slot {cardinality}"
                    )))
                } else {
                    Ok(())
                }
            }
            (FieldKind::Scalar { .. }, AnswerValue::Scalar(v)) if v.is_finite() => Ok(()),
            (FieldKind::Scalar { .. }, AnswerValue::Scalar(v)) => {
                Err(Error::Encoding(format!("non-finite scalar answer {v}")))
            }
            (FieldKind::Scalar { .. }, AnswerValue::ScalarUnknown) => Ok(()),
            _ => Err(Error::Encoding(format!(
                "answer {value:?} does not match field kind"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub id: FieldId,
    pub name: String,
    pub kind: FieldKind,
    pub screen_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSchema", into = "RawSchema")]
pub struct MetadataSchema {
    fields: Vec<FieldSpec>,
    offsets: Vec<usize>,
    width: usize,
}

#[derive(Serialize, Deserialize)]
struct RawSchema {
    fields: Vec<FieldSpec>,
}

impl TryFrom<RawSchema> for MetadataSchema {
    type Error = Error;

    fn try_from(raw: RawSchema) -> Result<Self> {
        MetadataSchema::new(raw.fields)
    }
}

impl From<MetadataSchema> for RawSchema {
    fn from(schema: MetadataSchema) -> Self {
        RawSchema {
            fields: schema.fields,
        }
    }
}

impl MetadataSchema {
    pub fn new(fields: Vec<FieldSpec>) -> Result<Self> {
        for (i, f) in fields.iter().enumerate() {
            if f.id != i {
                return Err(Error::SchemaMismatch(format!(
                    "field ids must be dense 0..K-1; position {i} holds id {}",
                    f.id
                )));
            }
            match &f.kind {
                FieldKind::Categorical {
                    cardinality,
                    options,
                } => {
                    if *cardinality == 0 {
                        return Err(Error::SchemaMismatch(format!("field {i} has no options")));
                    }
                    if !options.is_empty() && options.len() != *cardinality {
                        return Err(Error::SchemaMismatch(format!(
                            "field {i} lists {} option labels for cardinality {cardinality}",
                            options.len()
                        )));
                    }
                }
                FieldKind::Scalar {
                    placeholder,
                    p10,
                    p50,
                    p90,
                } => {
                    if !(p10 <= p50 && p50 <= p90) || !p10.is_finite() || !p90.is_finite() {
                        return Err(Error::SchemaMismatch(format!(
                            "field {i} percentiles must satisfy p10 <= p50 <= p90"
                        )));
                    }
                    if placeholder != p50 {
                        return Err(Error::SchemaMismatch(format!(
                            "field {i} placeholder must equal p50"
                        )));
                    }
                }
            }
        }
        let mut offsets = Vec::with_capacity(fields.len());
        let mut width = 0;
        for f in &fields {
            offsets.push(width);
            width += f.kind.width();
        }
        Ok(MetadataSchema {
            fields,
            offsets,
            width,
        })
    }

    pub fn fields(&self) -> &[FieldSpec] {
        &self.fields
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn field(&self, id: FieldId) -> Result<&FieldSpec> {
        self.fields
            .get(id)
            .ok_or_else(|| Error::SchemaMismatch(format!("unknown field id {id}")))
    }

    /// Width of the encoded metadata vector.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn offset(&self, id: FieldId) -> usize {
        self.offsets[id]
    }

    pub fn check_answer(&self, id: FieldId, value: &AnswerValue) -> Result<()> {
        self.field(id)?.kind.check(value)
    }

    pub fn screens(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.fields.iter().map(|f| f.screen_id).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Stable short fingerprint of the schema, recorded in model files.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("schema serializes");
        crate::rng::fingerprint(&bytes)[..16].to_string()
    }

    /// The 25-question dermatology intake layout: age plus 24 categorical
    /// questions whose blocks total 100 slots.
    pub fn dermatology_preset() -> Self {
        let mut fields = Vec::new();
        let mut push = |name: &str, kind: FieldKind, screen: usize| {
            let id = fields.len();
            fields.push(FieldSpec {
                id,
                name: name.to_string(),
                kind,
                screen_id: screen,
            });
        };
        push("age", FieldKind::scalar(22.0, 44.0, 71.0), 0);
        push("gender", FieldKind::categorical(5), 0);
        push("skin_type", FieldKind::categorical(6), 0);
        let yes_no = [
            "appearance_concerning",
            "bleeding",
            "burning",
            "chills",
            "fatigue",
            "fever",
            "joint_pain",
            "joint_pain_2",
            "mouth_sores",
            "shortness_of_breath",
            "no_other_symptoms",
            "itchy",
            "getting_darker",
            "getting_larger",
            "painful",
            "history_eczema",
            "history_psoriasis",
            "history_melanoma",
            "history_skin_cancer",
        ];
        for (i, name) in yes_no.iter().enumerate() {
            push(name, FieldKind::categorical(2), 1 + i / 5);
        }
        push("body_part", FieldKind::categorical(12), 5);
        push("skin_issue", FieldKind::categorical(6), 5);
        push("duration", FieldKind::categorical(9), 5);
        MetadataSchema::new(fields).expect("preset is valid")
    }
}

/// Encodes a partial answer map into the fixed-width metadata vector.
///
/// Unanswered categorical fields light their Unknown slot; unanswered or
/// unknown scalars take the schema placeholder, so a scalar answered exactly
/// at its placeholder encodes the same as an unknown one.
pub fn encode_metadata(answers: &Answers, schema: &MetadataSchema) -> Result<Vec<f64>> {
    for (&id, value) in answers {
        schema.check_answer(id, value)?;
    }
    let mut out = vec![0.0; schema.width()];
    for field in schema.fields() {
        let base = schema.offset(field.id);
        match &field.kind {
            FieldKind::Categorical { cardinality, .. } => {
                let slot = match answers.get(&field.id) {
                    Some(AnswerValue::Categorical(i)) => *i,
                    _ => *cardinality,
                };
                out[base + slot] = 1.0;
            }
            FieldKind::Scalar { placeholder, .. } => {
                out[base] = match answers.get(&field.id) {
                    Some(AnswerValue::Scalar(v)) => *v,
                    _ => *placeholder,
                };
            }
        }
    }
    Ok(out)
}
