#![allow(dead_code)]

use mint_core::classifier::{train, ModelConfig};
use mint_core::synthdata::{generate, GeneratorConfig, SyntheticData};
use mint_core::{
    AnswerValue, Answers, Case, Classifier, FieldKind, FieldSpec, ImageRecord, MetadataSchema,
    PredictiveDistribution, Result, Severity, TrainedModel, ViewType,
};

type PredictFn = dyn Fn(&[&[f64]], &Answers) -> Vec<f64> + Send + Sync;

/// Classifier backed by a closure, for hand-built scenarios.
pub struct FnClassifier {
    pub classes: usize,
    pub f: Box<PredictFn>,
}

impl FnClassifier {
    pub fn new(
        classes: usize,
        f: impl Fn(&[&[f64]], &Answers) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        FnClassifier {
            classes,
            f: Box::new(f),
        }
    }
}

impl Classifier for FnClassifier {
    fn num_classes(&self) -> usize {
        self.classes
    }

    fn predict(
        &self,
        images: &[&[f64]],
        answers: &Answers,
        _schema: &MetadataSchema,
    ) -> Result<PredictiveDistribution> {
        PredictiveDistribution::new((self.f)(images, answers))
    }
}

pub fn yes_no_schema(n_fields: usize) -> MetadataSchema {
    MetadataSchema::new(
        (0..n_fields)
            .map(|id| FieldSpec {
                id,
                name: format!("q{id}"),
                kind: FieldKind::categorical(2),
                screen_id: id,
            })
            .collect(),
    )
    .unwrap()
}

/// Smaller than the default world so property tests stay quick.
pub fn small_config(seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        train_cases: 600,
        val_cases: 120,
        test_cases: 120,
        seed,
        ..Default::default()
    }
}

pub fn small_world(seed: u64) -> (SyntheticData, TrainedModel) {
    let g = small_config(seed);
    let data = generate(&g).unwrap();
    let config = ModelConfig {
        embedding_dim: g.embedding_dim,
        num_classes: g.num_classes,
        steps: 800,
        eval_every: 200,
        seed,
        ..Default::default()
    };
    let (model, _) = train(&data.train, &data.val, &data.schema, &config).unwrap();
    (data, model)
}

/// A case with `n_images` near-view images whose embedding is the image's
/// position, and every answer set to `answer`.
pub fn toy_case(
    case_id: u64,
    n_images: usize,
    n_fields: usize,
    answer: usize,
    label: usize,
) -> Case {
    Case {
        case_id,
        images: (0..n_images)
            .map(|i| ImageRecord {
                view: ViewType::Near,
                embedding: vec![i as f64],
            })
            .collect(),
        metadata: vec![AnswerValue::Categorical(answer); n_fields],
        label,
        difficulty: 0.0,
        severity: Severity::Low,
    }
}
