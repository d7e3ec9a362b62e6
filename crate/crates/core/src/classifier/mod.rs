//! Reference multi-modal classifier: mean-pooled image embeddings, a
//! metadata embedding, concat or FiLM fusion, and a two-layer softmax head.
//!
//! The metadata branch sees the encoded vector *relative to the all-unknown
//! encoding* (scalars further divided by a fixed spread), so a fully masked
//! record is the zero vector and contributes nothing to the branch weights.

mod train;

use serde::{Deserialize, Serialize};

use crate::case::pool_image_embeddings;
use crate::distribution::PredictiveDistribution;
use crate::error::{Error, Result};
use crate::schema::{encode_metadata, Answers, FieldKind, MetadataSchema};

pub use train::{full_input_accuracy, loss_and_gradients, train, Example, TrainReport};

/// Anything that maps a partial input set to a predictive distribution.
///
/// Implementations must be deterministic and total over every subset of
/// inputs, including no metadata at all.
pub trait Classifier: Send + Sync {
    fn num_classes(&self) -> usize;

    fn predict(
        &self,
        images: &[&[f64]],
        answers: &Answers,
        schema: &MetadataSchema,
    ) -> Result<PredictiveDistribution>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    Concat,
    Film,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub fusion: Fusion,
    pub hidden_size: usize,
    pub meta_embed_size: usize,
    pub embedding_dim: usize,
    pub num_classes: usize,
    pub mask_prob: f64,
    pub image_drop_prob: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub decay_factor: f64,
    /// L2 penalty on weight matrices (biases are not decayed).
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Validation Top-3 is checked every this many steps for checkpoint selection.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            fusion: Fusion::Film,
            hidden_size: 64,
            meta_embed_size: 32,
            embedding_dim: 16,
            num_classes: 12,
            mask_prob: 0.3,
            image_drop_prob: 0.5,
            learning_rate: 0.05,
            momentum: 0.9,
            decay_factor: 0.1,
            weight_decay: 0.01,
            steps: 4000,
            batch_size: 16,
            eval_every: 250,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {p} outside [0,1]")))
            }
        };
        prob("mask_prob", self.mask_prob)?;
        prob("image_drop_prob", self.image_drop_prob)?;
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay = {} must be non-negative",
                self.weight_decay
            )));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be >= 1".into()));
        }
        if self.hidden_size == 0 || self.meta_embed_size == 0 || self.embedding_dim == 0 {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        Ok(())
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// y = A x
    fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// y = Aᵀ x
    fn t_matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.cols];
        for (r, xr) in x.iter().enumerate() {
            if *xr == 0.0 {
                continue;
            }
            for (yc, a) in y.iter_mut().zip(self.row(r)) {
                *yc += a * xr;
            }
        }
        y
    }

    /// A += u vᵀ
    fn add_outer(&mut self, u: &[f64], v: &[f64]) {
        for (r, ur) in u.iter().enumerate() {
            if *ur == 0.0 {
                continue;
            }
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (a, vc) in row.iter_mut().zip(v) {
                *a += ur * vc;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Trainable parameters. Also used as the gradient container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    /// Metadata embedding, no bias: `meta_embed_size × metadata width`.
    pub meta_embed: Matrix,
    /// FiLM scale offset (γ = 1 + W e + b); empty for concat fusion.
    pub film_gamma_w: Matrix,
    pub film_gamma_b: Vec<f64>,
    pub film_beta_w: Matrix,
    pub film_beta_b: Vec<f64>,
    pub hidden_w: Matrix,
    pub hidden_b: Vec<f64>,
    pub out_w: Matrix,
    pub out_b: Vec<f64>,
}

impl Params {
    pub fn zeros(config: &ModelConfig, meta_width: usize) -> Self {
        let (d, e, h, c) = (
            config.embedding_dim,
            config.meta_embed_size,
            config.hidden_size,
            config.num_classes,
        );
        let (film_rows, head_in) = match config.fusion {
            Fusion::Film => (d, d),
            Fusion::Concat => (0, d + e),
        };
        Params {
            meta_embed: Matrix::zeros(e, meta_width),
            film_gamma_w: Matrix::zeros(film_rows, e),
            film_gamma_b: vec![0.0; film_rows],
            film_beta_w: Matrix::zeros(film_rows, e),
            film_beta_b: vec![0.0; film_rows],
            hidden_w: Matrix::zeros(h, head_in),
            hidden_b: vec![0.0; h],
            out_w: Matrix::zeros(c, h),
            out_b: vec![0.0; c],
        }
    }

    pub fn slices(&self) -> [&[f64]; 9] {
        [
            &self.meta_embed.data,
            &self.film_gamma_w.data,
            &self.film_gamma_b,
            &self.film_beta_w.data,
            &self.film_beta_b,
            &self.hidden_w.data,
            &self.hidden_b,
            &self.out_w.data,
            &self.out_b,
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 9] {
        [
            &mut self.meta_embed.data,
            &mut self.film_gamma_w.data,
            &mut self.film_gamma_b,
            &mut self.film_beta_w.data,
            &mut self.film_beta_b,
            &mut self.hidden_w.data,
            &mut self.hidden_b,
            &mut self.out_w.data,
            &mut self.out_b,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.slices()
            .iter()
            .flat_map(|s| s.iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        let mut it = values.iter();
        for s in self.slices_mut() {
            for x in s.iter_mut() {
                *x = *it.next().expect("flat vector length matches");
            }
        }
    }

    /// L2 norm of the gradient reaching the metadata branch weights.
    pub fn metadata_branch_norm(&self) -> f64 {
        [
            &self.meta_embed.data,
            &self.film_gamma_w.data,
            &self.film_beta_w.data,
        ]
        .iter()
        .flat_map(|s| s.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
    }
}

/// Intermediate activations kept for backpropagation.
pub(crate) struct Activations {
    pub meta_in: Vec<f64>,
    pub meta_pre: Vec<f64>,
    pub meta_emb: Vec<f64>,
    pub image: Vec<f64>,
    pub gamma: Vec<f64>,
    pub head_in: Vec<f64>,
    pub hidden_pre: Vec<f64>,
    pub hidden: Vec<f64>,
    pub probs: PredictiveDistribution,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub config: ModelConfig,
    pub schema_fingerprint: String,
    /// Encoded vector of the all-unknown record.
    pub meta_center: Vec<f64>,
    /// Per-slot multiplier applied after centering (1 for one-hot slots).
    pub meta_scale: Vec<f64>,
    pub params: Params,
}

impl TrainedModel {
    /// Untrained model with zero weights, shaped for `schema`.
    pub fn zeros(config: ModelConfig, schema: &MetadataSchema) -> Result<Self> {
        config.validate()?;
        let meta_center = encode_metadata(&Answers::new(), schema)?;
        let mut meta_scale = vec![1.0; schema.width()];
        for f in schema.fields() {
            if let FieldKind::Scalar { p10, p90, .. } = f.kind {
                let spread = (p90 - p10) / 2.0;
                meta_scale[schema.offset(f.id)] = if spread > 0.0 { 1.0 / spread } else { 1.0 };
            }
        }
        let params = Params::zeros(&config, schema.width());
        Ok(TrainedModel {
            config,
            schema_fingerprint: schema.fingerprint(),
            meta_center,
            meta_scale,
            params,
        })
    }

    pub fn meta_width(&self) -> usize {
        self.meta_center.len()
    }

    pub fn check_schema(&self, schema: &MetadataSchema) -> Result<()> {
        if schema.fingerprint() != self.schema_fingerprint {
            return Err(Error::SchemaMismatch(format!(
                "model was trained for schema {} but got {}",
                self.schema_fingerprint,
                schema.fingerprint()
            )));
        }
        Ok(())
    }

    /// Forward pass on a pooled image embedding and an encoded metadata vector.
    pub fn forward(
        &self,
        pooled_image: &[f64],
        metadata_vec: &[f64],
    ) -> Result<PredictiveDistribution> {
        Ok(self.forward_full(pooled_image, metadata_vec)?.probs)
    }

    pub(crate) fn forward_full(
        &self,
        pooled_image: &[f64],
        metadata_vec: &[f64],
    ) -> Result<Activations> {
        let d = self.config.embedding_dim;
        if pooled_image.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: pooled_image.len(),
            });
        }
        if metadata_vec.len() != self.meta_width() {
            return Err(Error::DimensionMismatch {
                expected: self.meta_width(),
                got: metadata_vec.len(),
            });
        }
        let p = &self.params;
        let meta_in: Vec<f64> = metadata_vec
            .iter()
            .zip(&self.meta_center)
            .zip(&self.meta_scale)
            .map(|((m, c), s)| (m - c) * s)
            .collect();
        let meta_pre = p.meta_embed.matvec(&meta_in);
        let meta_emb: Vec<f64> = meta_pre.iter().map(|x| x.max(0.0)).collect();
        let (gamma, head_in) = match self.config.fusion {
            Fusion::Concat => {
                let mut z = pooled_image.to_vec();
                z.extend_from_slice(&meta_emb);
                (Vec::new(), z)
            }
            Fusion::Film => {
                let g: Vec<f64> = p
                    .film_gamma_w
                    .matvec(&meta_emb)
                    .iter()
                    .zip(&p.film_gamma_b)
                    .map(|(w, b)| 1.0 + w + b)
                    .collect();
                let beta: Vec<f64> = p
                    .film_beta_w
                    .matvec(&meta_emb)
                    .iter()
                    .zip(&p.film_beta_b)
                    .map(|(w, b)| w + b)
                    .collect();
                let z = g
                    .iter()
                    .zip(pooled_image)
                    .zip(&beta)
                    .map(|((g, v), b)| g * v + b)
                    .collect();
                (g, z)
            }
        };
        let hidden_pre: Vec<f64> = p
            .hidden_w
            .matvec(&head_in)
            .iter()
            .zip(&p.hidden_b)
            .map(|(x, b)| x + b)
            .collect();
        let hidden: Vec<f64> = hidden_pre.iter().map(|x| x.max(0.0)).collect();
        let logits: Vec<f64> = p
            .out_w
            .matvec(&hidden)
            .iter()
            .zip(&p.out_b)
            .map(|(x, b)| x + b)
            .collect();
        let probs = PredictiveDistribution::from_logits(&logits)?;
        Ok(Activations {
            meta_in,
            meta_pre,
            meta_emb,
            image: pooled_image.to_vec(),
            gamma,
            head_in,
            hidden_pre,
            hidden,
            probs,
        })
    }

    /// Accumulates `scale × ∂CE/∂θ` for one example into `grads`.
    pub(crate) fn backward(&self, act: &Activations, label: usize, scale: f64, grads: &mut Params) {
        let p = &self.params;
        let d = self.config.embedding_dim;
        let mut dlogits: Vec<f64> = act.probs.probs().iter().map(|q| q * scale).collect();
        dlogits[label] -= scale;

        grads.out_w.add_outer(&dlogits, &act.hidden);
        add_into(&mut grads.out_b, &dlogits);
        let dhidden = p.out_w.t_matvec(&dlogits);
        let dhidden_pre: Vec<f64> = dhidden
            .iter()
            .zip(&act.hidden_pre)
            .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
            .collect();
        grads.hidden_w.add_outer(&dhidden_pre, &act.head_in);
        add_into(&mut grads.hidden_b, &dhidden_pre);
        let dhead = p.hidden_w.t_matvec(&dhidden_pre);

        let demb = match self.config.fusion {
            Fusion::Concat => dhead[d..].to_vec(),
            Fusion::Film => {
                let dgamma: Vec<f64> = dhead.iter().zip(&act.image).map(|(g, v)| g * v).collect();
                grads.film_gamma_w.add_outer(&dgamma, &act.meta_emb);
                add_into(&mut grads.film_gamma_b, &dgamma);
                grads.film_beta_w.add_outer(&dhead, &act.meta_emb);
                add_into(&mut grads.film_beta_b, &dhead);
                let mut de = p.film_gamma_w.t_matvec(&dgamma);
                add_into(&mut de, &p.film_beta_w.t_matvec(&dhead));
                de
            }
        };
        let dpre: Vec<f64> = demb
            .iter()
            .zip(&act.meta_pre)
            .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
            .collect();
        grads.meta_embed.add_outer(&dpre, &act.meta_in);
        debug_assert!(act.gamma.is_empty() || act.gamma.len() == d);
    }
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

impl Classifier for TrainedModel {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn predict(
        &self,
        images: &[&[f64]],
        answers: &Answers,
        schema: &MetadataSchema,
    ) -> Result<PredictiveDistribution> {
        let pooled = pool_image_embeddings(images, self.config.embedding_dim)?;
        let meta = encode_metadata(answers, schema)?;
        self.forward(&pooled, &meta)
    }
}
