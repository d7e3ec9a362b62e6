use mint_core::classifier::{loss_and_gradients, Example};
use mint_core::rng::stream;
use mint_core::{
    encode_metadata, AnswerValue, Answers, FieldKind, FieldSpec, Fusion, MetadataSchema,
    ModelConfig, TrainedModel,
};
use rand::Rng;

const H: f64 = 1e-4;
const REL_TOL: f64 = 1e-4;

fn toy(fusion: Fusion, seed: u64) -> (TrainedModel, Vec<Example>) {
    let schema = MetadataSchema::new(vec![
        FieldSpec {
            id: 0,
            name: "fever".into(),
            kind: FieldKind::categorical(2),
            screen_id: 0,
        },
        FieldSpec {
            id: 1,
            name: "age".into(),
            kind: FieldKind::scalar(20.0, 40.0, 60.0),
            screen_id: 0,
        },
    ])
    .unwrap();
    let config = ModelConfig {
        fusion,
        hidden_size: 4,
        meta_embed_size: 2,
        embedding_dim: 3,
        num_classes: 3,
        seed,
        ..Default::default()
    };
    let mut model = TrainedModel::zeros(config, &schema).unwrap();
    let mut rng = stream(seed, "grad-check");
    let flat: Vec<f64> = (0..model.params.num_params())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    model.params.set_flat(&flat);
    let batch = (0..4)
        .map(|i| {
            let mut answers = Answers::new();
            answers.insert(0, AnswerValue::Categorical(i % 3));
            if i % 2 == 0 {
                answers.insert(1, AnswerValue::Scalar(rng.random_range(10.0..80.0)));
            }
            Example {
                pooled_image: (0..3).map(|_| rng.random_range(-2.0..2.0)).collect(),
                metadata: encode_metadata(&answers, &schema).unwrap(),
                label: i % 3,
            }
        })
        .collect();
    (model, batch)
}

fn check(fusion: Fusion, seed: u64) -> usize {
    let (model, batch) = toy(fusion, seed);
    let (_, grads) = loss_and_gradients(&model, &batch).unwrap();
    let analytic = grads.flat();
    let base = model.params.flat();
    let mut probe = model.clone();
    let mut loss_at = |theta: &[f64]| {
        probe.params.set_flat(theta);
        loss_and_gradients(&probe, &batch).unwrap().0
    };
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += H;
        let mut minus = base.clone();
        minus[i] -= H;
        let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * H);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-3);
        assert!(
            (a - numeric).abs() / denom <= REL_TOL,
            "{fusion:?} seed {seed} param {i}: analytic {a} numeric {numeric}"
        );
    }
    base.len()
}

#[test]
fn film_gradients_match_finite_differences() {
    for seed in 0..3 {
        assert!(check(Fusion::Film, seed) > 10);
    }
}

#[test]
fn concat_gradients_match_finite_differences() {
    for seed in 0..3 {
        assert!(check(Fusion::Concat, seed) > 10);
    }
}
