use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Classifier, ModelConfig, Params, TrainedModel};
use crate::case::{pool_image_embeddings, Case};
use crate::error::{Error, Result};
use crate::rng;
use crate::schema::{encode_metadata, Answers, MetadataSchema};

/// Positions of the weight matrices in `Params::slices`.
const DECAYED_SLICES: [usize; 5] = [0, 1, 3, 5, 7];

/// One already-encoded training example.
#[derive(Clone, Debug)]
pub struct Example {
    pub pooled_image: Vec<f64>,
    pub metadata: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub final_loss: f64,
    /// (step, validation top-3) at every checkpoint evaluation.
    pub checkpoints: Vec<(usize, f64)>,
    pub selected_step: usize,
    /// Largest metadata-branch gradient norm seen during training.
    pub max_metadata_grad_norm: f64,
}

/// Mean softmax cross-entropy over `batch` and its analytic gradient.
pub fn loss_and_gradients(model: &TrainedModel, batch: &[Example]) -> Result<(f64, Params)> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    let mut grads = Params::zeros(&model.config, model.meta_width());
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for ex in batch {
        if ex.label >= model.config.num_classes {
            return Err(Error::Precondition(format!(
                "label {} out of range",
                ex.label
            )));
        }
        let act = model.forward_full(&ex.pooled_image, &ex.metadata)?;
        loss += act.probs.cross_entropy(ex.label) * scale;
        model.backward(&act, ex.label, scale, &mut grads);
    }
    Ok((loss, grads))
}

fn glorot(rng: &mut impl Rng, data: &mut [f64], fan_in: usize, fan_out: usize, gain: f64) {
    let a = gain * (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    for x in data.iter_mut() {
        *x = rng.random_range(-a..a);
    }
}

fn initialize(model: &mut TrainedModel) {
    let mut r = rng::stream(model.config.seed, "train:init");
    let p = &mut model.params;
    let (rows, cols) = (p.meta_embed.rows, p.meta_embed.cols);
    glorot(&mut r, &mut p.meta_embed.data, cols, rows, 1.0);
    let (rows, cols) = (p.film_gamma_w.rows, p.film_gamma_w.cols);
    glorot(&mut r, &mut p.film_gamma_w.data, cols, rows, 0.1);
    glorot(&mut r, &mut p.film_beta_w.data, cols, rows, 0.5);
    let (rows, cols) = (p.hidden_w.rows, p.hidden_w.cols);
    glorot(&mut r, &mut p.hidden_w.data, cols, rows, 2f64.sqrt());
    let (rows, cols) = (p.out_w.rows, p.out_w.cols);
    glorot(&mut r, &mut p.out_w.data, cols, rows, 1.0);
}

/// Encodes `case` with every input present.
pub(crate) fn full_example(case: &Case, schema: &MetadataSchema, dim: usize) -> Result<Example> {
    let images: Vec<&[f64]> = case
        .images
        .iter()
        .map(|im| im.embedding.as_slice())
        .collect();
    let answers: Answers = case.metadata.iter().copied().enumerate().collect();
    Ok(Example {
        pooled_image: pool_image_embeddings(&images, dim)?,
        metadata: encode_metadata(&answers, schema)?,
        label: case.label,
    })
}

fn masked_example(
    case: &Case,
    schema: &MetadataSchema,
    config: &ModelConfig,
    rng: &mut impl Rng,
) -> Result<Example> {
    let mut images: Vec<&[f64]> = vec![case.images[0].embedding.as_slice()];
    for im in &case.images[1..] {
        if !rng.random_bool(config.image_drop_prob) {
            images.push(&im.embedding);
        }
    }
    let mut answers = Answers::new();
    for (id, v) in case.metadata.iter().enumerate() {
        if !rng.random_bool(config.mask_prob) {
            answers.insert(id, *v);
        }
    }
    Ok(Example {
        pooled_image: pool_image_embeddings(&images, config.embedding_dim)?,
        metadata: encode_metadata(&answers, schema)?,
        label: case.label,
    })
}

fn top3(model: &TrainedModel, examples: &[Example]) -> Result<f64> {
    let mut hits = 0usize;
    for ex in examples {
        if model
            .forward(&ex.pooled_image, &ex.metadata)?
            .in_top_k(ex.label, 3)
        {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

/// Trains with momentum SGD, an exponentially decaying learning rate
/// `lr₀ · decay^(t/steps)`, and per-example random masking of metadata
/// fields and non-first images. When `validation` is non-empty the
/// checkpoint with the best full-input Top-3 accuracy is returned.
pub fn train(
    cases: &[Case],
    validation: &[Case],
    schema: &MetadataSchema,
    config: &ModelConfig,
) -> Result<(TrainedModel, TrainReport)> {
    config.validate()?;
    if cases.is_empty() {
        return Err(Error::Training {
            step: 0,
            message: "empty dataset".into(),
        });
    }
    for case in cases.iter().chain(validation) {
        case.validate(schema, config.num_classes)?;
        if case.embedding_dim() != config.embedding_dim {
            return Err(Error::DimensionMismatch {
                expected: config.embedding_dim,
                got: case.embedding_dim(),
            });
        }
    }
    let mut model = TrainedModel::zeros(config.clone(), schema)?;
    initialize(&mut model);

    let val_examples = validation
        .iter()
        .map(|c| full_example(c, schema, config.embedding_dim))
        .collect::<Result<Vec<_>>>()?;

    let mut report = TrainReport::default();
    let mut best: Option<(f64, Params)> = None;
    let mut velocity = Params::zeros(config, model.meta_width());
    let mut r = rng::stream(config.seed, "train:batches");

    for step in 0..config.steps {
        let batch = (0..config.batch_size)
            .map(|_| {
                masked_example(
                    cases.choose(&mut r).expect("non-empty"),
                    schema,
                    config,
                    &mut r,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let (loss, grads) = loss_and_gradients(&model, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                message: format!("loss became {loss}"),
            });
        }
        report.final_loss = loss;
        report.max_metadata_grad_norm = report
            .max_metadata_grad_norm
            .max(grads.metadata_branch_norm());

        let lr = config.learning_rate * config.decay_factor.powf(step as f64 / config.steps as f64);
        for (k, ((w, v), g)) in model
            .params
            .slices_mut()
            .into_iter()
            .zip(velocity.slices_mut())
            .zip(grads.slices())
            .enumerate()
        {
            let wd = if DECAYED_SLICES.contains(&k) {
                config.weight_decay
            } else {
                0.0
            };
            for ((wi, vi), gi) in w.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
                *vi = config.momentum * *vi - lr * (gi + wd * *wi);
                *wi += *vi;
            }
        }

        let done = step + 1;
        if !val_examples.is_empty()
            && (done % config.eval_every.max(1) == 0 || done == config.steps)
        {
            let acc = top3(&model, &val_examples)?;
            report.checkpoints.push((done, acc));
            if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                best = Some((acc, model.params.clone()));
                report.selected_step = done;
            }
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    } else {
        report.selected_step = config.steps;
    }
    Ok((model, report))
}

/// Full-input Top-k accuracy of any classifier over `cases`.
pub fn full_input_accuracy(
    model: &dyn Classifier,
    cases: &[Case],
    schema: &MetadataSchema,
    k: usize,
) -> Result<f64> {
    let mut hits = 0;
    for c in cases {
        let images: Vec<&[f64]> = c.images.iter().map(|im| im.embedding.as_slice()).collect();
        let answers: Answers = c.metadata.iter().copied().enumerate().collect();
        if model
            .predict(&images, &answers, schema)?
            .in_top_k(c.label, k)
        {
            hits += 1;
        }
    }
    Ok(hits as f64 / cases.len().max(1) as f64)
}
