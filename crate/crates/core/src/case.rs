//! Cases, image pooling, and the JSON-lines dataset format.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{AnswerValue, FieldKind, MetadataSchema, ViewType};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Low,
    Medium,
    High,
}

impl Severity {
    pub const ALL: [Severity; 3] = [Severity::Low, Severity::Medium, Severity::High];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub view: ViewType,
    pub embedding: Vec<f64>,
}

/// One patient episode with every input available for simulation.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub case_id: u64,
    pub images: Vec<ImageRecord>,
    /// Ground-truth answer per field id (may itself be Unknown).
    pub metadata: Vec<AnswerValue>,
    pub label: usize,
    pub difficulty: f64,
    pub severity: Severity,
}

impl Case {
    pub fn validate(&self, schema: &MetadataSchema, num_classes: usize) -> Result<()> {
        if self.images.is_empty() {
            return Err(Error::Precondition(format!(
                "case {} has no images",
                self.case_id
            )));
        }
        let dim = self.images[0].embedding.len();
        if let Some(bad) = self.images.iter().find(|im| im.embedding.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: bad.embedding.len(),
            });
        }
        if self.metadata.len() != schema.len() {
            return Err(Error::SchemaMismatch(format!(
                "case {} stores {} answers for {} fields",
                self.case_id,
                self.metadata.len(),
                schema.len()
            )));
        }
        for (id, v) in self.metadata.iter().enumerate() {
            schema.check_answer(id, v)?;
        }
        if self.label >= num_classes {
            return Err(Error::Precondition(format!(
                "label {} out of range",
                self.label
            )));
        }
        if !(0.0..=1.0).contains(&self.difficulty) {
            return Err(Error::Precondition(format!(
                "difficulty {} outside [0,1]",
                self.difficulty
            )));
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        self.images.first().map_or(0, |im| im.embedding.len())
    }

    /// Total number of acquirable inputs (images plus metadata fields).
    pub fn num_inputs(&self) -> usize {
        self.images.len() + self.metadata.len()
    }
}

/// Element-wise mean of image embeddings; an empty list pools to zeros.
pub fn pool_image_embeddings(embeddings: &[&[f64]], dim: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; dim];
    if embeddings.is_empty() {
        return Ok(out);
    }
    for e in embeddings {
        if e.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: e.len(),
            });
        }
        for (o, x) in out.iter_mut().zip(e.iter()) {
            *o += x;
        }
    }
    let n = embeddings.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct CaseLine {
    case_id: u64,
    label: usize,
    severity: Severity,
    difficulty: f64,
    images: Vec<ImageRecord>,
    metadata: Vec<MetaLine>,
}

#[derive(Serialize, Deserialize)]
struct MetaLine {
    field_id: usize,
    value: RawValue,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RawValue {
    Index(u64),
    Real(f64),
    Token(String),
}

fn to_raw(kind: &FieldKind, v: &AnswerValue) -> RawValue {
    if kind.is_unknown(v) {
        return RawValue::Token("unknown".into());
    }
    match v {
        AnswerValue::Categorical(i) => RawValue::Index(*i as u64),
        AnswerValue::Scalar(x) => RawValue::Real(*x),
        AnswerValue::ScalarUnknown => RawValue::Token("unknown".into()),
    }
}

fn from_raw(kind: &FieldKind, raw: &RawValue) -> Result<AnswerValue> {
    match (kind, raw) {
        (_, RawValue::Token(t)) if t == "unknown" => Ok(kind.unknown()),
        (_, RawValue::Token(t)) => Err(Error::Encoding(format!("unexpected token `{t}`"))),
        (FieldKind::Categorical { .. }, RawValue::Index(i)) => {
            Ok(AnswerValue::Categorical(*i as usize))
        }
        (FieldKind::Categorical { .. }, RawValue::Real(x)) => Err(Error::Encoding(format!(
            "categorical field given real value {x}"
        ))),
        (FieldKind::Scalar { .. }, RawValue::Index(i)) => Ok(AnswerValue::Scalar(*i as f64)),
        (FieldKind::Scalar { .. }, RawValue::Real(x)) => Ok(AnswerValue::Scalar(*x)),
    }
}

pub fn write_cases_jsonl<W: Write>(
    mut w: W,
    cases: &[Case],
    schema: &MetadataSchema,
) -> Result<()> {
    for case in cases {
        let line = CaseLine {
            case_id: case.case_id,
            label: case.label,
            severity: case.severity,
            difficulty: case.difficulty,
            images: case.images.clone(),
            metadata: case
                .metadata
                .iter()
                .enumerate()
                .map(|(id, v)| MetaLine {
                    field_id: id,
                    value: to_raw(&schema.fields()[id].kind, v),
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_cases_jsonl<R: BufRead>(r: R, schema: &MetadataSchema) -> Result<Vec<Case>> {
    let mut cases = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: CaseLine = serde_json::from_str(&line)?;
        let mut metadata: Vec<Option<AnswerValue>> = vec![None; schema.len()];
        for m in &raw.metadata {
            let field = schema.field(m.field_id)?;
            if metadata[m.field_id].is_some() {
                return Err(Error::SchemaMismatch(format!(
                    "case {} answers field {} twice",
                    raw.case_id, m.field_id
                )));
            }
            metadata[m.field_id] = Some(from_raw(&field.kind, &m.value)?);
        }
        let metadata = metadata
            .into_iter()
            .enumerate()
            .map(|(id, v)| {
                v.ok_or_else(|| {
                    Error::SchemaMismatch(format!(
                        "case {} lacks an answer for field {id}",
                        raw.case_id
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        cases.push(Case {
            case_id: raw.case_id,
            images: raw.images,
            metadata,
            label: raw.label,
            difficulty: raw.difficulty,
            severity: raw.severity,
        });
    }
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{FieldKind, FieldSpec};
    use proptest::prelude::*;

    #[test]
    fn pooling_examples() {
        let a = [1.0, 2.0];
        let b = [3.0, 4.0];
        assert_eq!(pool_image_embeddings(&[&a, &b], 2).unwrap(), vec![2.0, 3.0]);
        assert_eq!(
            pool_image_embeddings(&[&[5.0, 5.0]], 2).unwrap(),
            vec![5.0, 5.0]
        );
        assert_eq!(pool_image_embeddings(&[], 3).unwrap(), vec![0.0; 3]);
        assert!(pool_image_embeddings(&[&a, &[1.0]], 2).is_err());
    }

    proptest! {
        #[test]
        fn pooling_is_permutation_invariant(
            v in proptest::collection::vec(proptest::collection::vec(-10i32..10, 3), 1..6),
            rot in 0usize..6,
        ) {
            let v: Vec<Vec<f64>> = v.into_iter().map(|x| x.into_iter().map(f64::from).collect()).collect();
            let mut w = v.clone();
            let k = rot % w.len();
            w.rotate_left(k);
            w.reverse();
            let a: Vec<&[f64]> = v.iter().map(|x| x.as_slice()).collect();
            let b: Vec<&[f64]> = w.iter().map(|x| x.as_slice()).collect();
            // integer-valued inputs make the sums exact in any order
            prop_assert_eq!(pool_image_embeddings(&a, 3).unwrap(), pool_image_embeddings(&b, 3).unwrap());
        }
    }

    #[test]
    fn jsonl_round_trip_preserves_unknowns() {
        let schema = MetadataSchema::new(vec![
            FieldSpec {
                id: 0,
                name: "age".into(),
                kind: FieldKind::scalar(20.0, 40.0, 60.0),
                screen_id: 0,
            },
            FieldSpec {
                id: 1,
                name: "itch".into(),
                kind: FieldKind::categorical(2),
                screen_id: 1,
            },
        ])
        .unwrap();
        let case = Case {
            case_id: 3,
            images: vec![ImageRecord {
                view: ViewType::Far,
                embedding: vec![0.5, -1.25],
            }],
            metadata: vec![AnswerValue::Scalar(40.0), AnswerValue::Categorical(2)],
            label: 1,
            difficulty: 0.3,
            severity: Severity::High,
        };
        let unknown_age = Case {
            case_id: 4,
            metadata: vec![AnswerValue::ScalarUnknown, AnswerValue::Categorical(0)],
            ..case.clone()
        };
        let mut buf = Vec::new();
        write_cases_jsonl(&mut buf, &[case.clone(), unknown_age.clone()], &schema).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("\"unknown\""));
        let back = read_cases_jsonl(buf.as_slice(), &schema).unwrap();
        assert_eq!(back, vec![case, unknown_age]);
    }

    #[test]
    fn missing_field_is_rejected() {
        let schema = MetadataSchema::new(vec![FieldSpec {
            id: 0,
            name: "x".into(),
            kind: FieldKind::categorical(2),
            screen_id: 0,
        }])
        .unwrap();
        let line = r#"{"case_id":1,"label":0,"severity":"low","difficulty":0.0,"images":[{"view":"near","embedding":[1.0]}],"metadata":[]}"#;
        assert!(read_cases_jsonl(line.as_bytes(), &schema).is_err());
    }
}
