use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::distribution::PredictiveDistribution;
use crate::error::{Error, Result};
use crate::schema::{AnswerValue, Answers, FieldId, MetadataSchema, ViewType};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquiredImage {
    /// Position in the case's image list (upload order in live sessions).
    pub index: usize,
    /// The view the engine asked for, if it asked for a specific one.
    pub requested: Option<ViewType>,
    pub view: ViewType,
    pub embedding: Vec<f64>,
}

/// Inputs acquired so far plus the classifier's prediction on exactly them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionState {
    pub case_id: u64,
    images: Vec<AcquiredImage>,
    answers: Answers,
    prediction: PredictiveDistribution,
    /// Acquisitions made after the opening image(s).
    steps_taken: usize,
}

impl AcquisitionState {
    pub fn new(
        case_id: u64,
        first: AcquiredImage,
        model: &dyn Classifier,
        schema: &MetadataSchema,
    ) -> Result<Self> {
        let prediction = model.predict(&[first.embedding.as_slice()], &Answers::new(), schema)?;
        Ok(AcquisitionState {
            case_id,
            images: vec![first],
            answers: Answers::new(),
            prediction,
            steps_taken: 0,
        })
    }

    pub fn images(&self) -> &[AcquiredImage] {
        &self.images
    }

    pub fn answers(&self) -> &Answers {
        &self.answers
    }

    pub fn prediction(&self) -> &PredictiveDistribution {
        &self.prediction
    }

    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }

    pub fn num_acquired(&self) -> usize {
        self.images.len() + self.answers.len()
    }

    pub fn has_image(&self, index: usize) -> bool {
        self.images.iter().any(|im| im.index == index)
    }

    /// Embeddings ordered by image index, so pooling does not depend on
    /// acquisition order.
    pub fn held_images(&self) -> Vec<(ViewType, &[f64])> {
        self.images
            .iter()
            .map(|i| (i.view, i.embedding.as_slice()))
            .collect()
    }

    pub fn image_slices(&self) -> Vec<&[f64]> {
        let mut ims: Vec<&AcquiredImage> = self.images.iter().collect();
        ims.sort_by_key(|im| im.index);
        ims.into_iter().map(|im| im.embedding.as_slice()).collect()
    }

    pub fn recompute(
        &self,
        model: &dyn Classifier,
        schema: &MetadataSchema,
    ) -> Result<PredictiveDistribution> {
        model.predict(&self.image_slices(), &self.answers, schema)
    }

    /// Adds an image. `counts_as_step` is false for opening acquisitions.
    pub fn add_image(
        &mut self,
        image: AcquiredImage,
        counts_as_step: bool,
        model: &dyn Classifier,
        schema: &MetadataSchema,
    ) -> Result<()> {
        if self.has_image(image.index) {
            return Err(Error::Precondition(format!(
                "image {} already acquired",
                image.index
            )));
        }
        if let Some(first) = self.images.first() {
            if first.embedding.len() != image.embedding.len() {
                return Err(Error::DimensionMismatch {
                    expected: first.embedding.len(),
                    got: image.embedding.len(),
                });
            }
        }
        self.images.push(image);
        self.prediction = self.recompute(model, schema)?;
        if counts_as_step {
            self.steps_taken += 1;
        }
        Ok(())
    }

    pub fn add_answer(
        &mut self,
        field: FieldId,
        value: AnswerValue,
        model: &dyn Classifier,
        schema: &MetadataSchema,
    ) -> Result<()> {
        schema.check_answer(field, &value)?;
        if self.answers.contains_key(&field) {
            return Err(Error::Precondition(format!(
                "field {field} already acquired"
            )));
        }
        self.answers.insert(field, value);
        self.prediction = self.recompute(model, schema)?;
        self.steps_taken += 1;
        Ok(())
    }

    /// Cache key identifying the acquired input set.
    pub(crate) fn key(&self) -> (Vec<usize>, Vec<FieldId>) {
        let mut ims: Vec<usize> = self.images.iter().map(|im| im.index).collect();
        ims.sort_unstable();
        (ims, self.answers.keys().copied().collect())
    }
}
