use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::case::Case;
use crate::classifier::Classifier;
use crate::distribution::PredictiveDistribution;
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::schema::{Answers, MetadataSchema, ViewType};

/// Features per state/view pair, excluding the bias term.
pub const FEATURE_WIDTH: usize = 26;

const RIDGE: f64 = 1e-6;
const META_KEEP_PROB: f64 = 0.5;

/// Linear regressor from the current prediction and the acquired images to
/// the expected drop in cross-entropy from one more image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageValueModel {
    /// `FEATURE_WIDTH` weights followed by the bias.
    pub weights: Vec<f64>,
    pub training_rows: usize,
}

/// Mean squared distance of the embeddings to their average, per dimension.
fn dispersion(acquired: &[(ViewType, &[f64])]) -> f64 {
    let Some((_, first)) = acquired.first() else {
        return 0.0;
    };
    let d = first.len();
    if d == 0 {
        return 0.0;
    }
    let mut mean = vec![0.0; d];
    for (_, e) in acquired {
        for (m, x) in mean.iter_mut().zip(e.iter()) {
            *m += x / acquired.len() as f64;
        }
    }
    let ss: f64 = acquired
        .iter()
        .flat_map(|(_, e)| e.iter().zip(&mean).map(|(x, m)| (x - m).powi(2)))
        .sum();
    ss / (acquired.len() * d) as f64
}

/// Layout:
///
/// | index | feature |
/// |-------|---------|
/// | 0..6 | entropy, top1, top2, margin, images held, answers held |
/// | 6..9 | requested view one-hot (`None` spreads it evenly) |
/// | 9, 10 | s = 1/(images+1), entropy * s |
/// | 11..14 | requested view * entropy * s |
/// | 14..17 | whether a near / far / other image is already held |
/// | 17, 18 | embedding dispersion, dispersion * s |
/// | 19..22 | requested view * (that view not yet held) |
pub fn image_features(
    prediction: &PredictiveDistribution,
    acquired: &[(ViewType, &[f64])],
    n_meta: usize,
    view: Option<ViewType>,
) -> [f64; FEATURE_WIDTH] {
    let ranked = prediction.ranked();
    let p = prediction.probs();
    let top1 = p[ranked[0]];
    let top2 = ranked.get(1).map_or(0.0, |&i| p[i]);
    let h = prediction.entropy_bits();
    let n_images = acquired.len();
    let s = 1.0 / (n_images as f64 + 1.0);
    let mut f = [0.0; FEATURE_WIDTH];
    f[..6].copy_from_slice(&[h, top1, top2, top1 - top2, n_images as f64, n_meta as f64]);
    match view {
        Some(v) => f[6 + v.index()] = 1.0,
        None => f[6..9].fill(1.0 / 3.0),
    }
    f[9] = s;
    f[10] = h * s;
    for (v, _) in acquired {
        f[14 + v.index()] = 1.0;
    }
    let disp = dispersion(acquired);
    f[17] = disp;
    f[18] = disp * s;
    for v in 0..3 {
        f[11 + v] = f[6 + v] * h * s;
        f[19 + v] = f[6 + v] * (1.0 - f[14 + v]);
    }
    let top3: f64 = ranked.iter().take(3).map(|&i| p[i]).sum();
    f[22] = top1.max(1e-12).ln();
    f[23] = (1.0 - top1).max(1e-12).ln();
    f[24] = top3;
    f[25] = h * h;
    f
}

impl ImageValueModel {
    pub fn predict(
        &self,
        prediction: &PredictiveDistribution,
        acquired: &[(ViewType, &[f64])],
        n_meta: usize,
        view: Option<ViewType>,
    ) -> f64 {
        let f = image_features(prediction, acquired, n_meta, view);
        f.iter().zip(&self.weights).map(|(x, w)| x * w).sum::<f64>() + self.weights[FEATURE_WIDTH]
    }
}

/// Fits the regressor on realized cross-entropy reductions. For each case
/// with at least two images, images are visited in a seeded random order; at
/// every prefix a random subset of the metadata is revealed and one row is
/// produced per view type still available (the first remaining image of that
/// view), plus one "any view" row whose target is the mean over all
/// remaining images.
pub fn train_image_value_model(
    model: &dyn Classifier,
    cases: &[Case],
    schema: &MetadataSchema,
    seed: u64,
) -> Result<ImageValueModel> {
    let mut rows: Vec<[f64; FEATURE_WIDTH]> = Vec::new();
    let mut targets: Vec<f64> = Vec::new();
    for case in cases.iter().filter(|c| c.images.len() >= 2) {
        let mut rng = stream(seed, &format!("ivm:{}", case.case_id));
        let mut order: Vec<usize> = (0..case.images.len()).collect();
        order.shuffle(&mut rng);
        for prefix in 1..order.len() {
            let mut answers = Answers::new();
            for f in schema.fields() {
                if rng.random_bool(META_KEEP_PROB) {
                    answers.insert(f.id, case.metadata[f.id]);
                }
            }
            let mut taken: Vec<usize> = order[..prefix].to_vec();
            taken.sort_unstable();
            let slices = |idx: &[usize]| {
                idx.iter()
                    .map(|&i| case.images[i].embedding.as_slice())
                    .collect::<Vec<_>>()
            };
            let current = model.predict(&slices(&taken), &answers, schema)?;
            let held: Vec<(ViewType, &[f64])> = taken
                .iter()
                .map(|&i| (case.images[i].view, case.images[i].embedding.as_slice()))
                .collect();
            let ce_now = current.cross_entropy(case.label);
            let mut gains = Vec::new();
            let mut seen = [false; 3];
            for &next in &order[prefix..] {
                let mut with = taken.clone();
                with.push(next);
                with.sort_unstable();
                let gain = ce_now
                    - model
                        .predict(&slices(&with), &answers, schema)?
                        .cross_entropy(case.label);
                gains.push(gain);
                let view = case.images[next].view;
                if !seen[view.index()] {
                    seen[view.index()] = true;
                    rows.push(image_features(&current, &held, answers.len(), Some(view)));
                    targets.push(gain);
                }
            }
            rows.push(image_features(&current, &held, answers.len(), None));
            targets.push(gains.iter().sum::<f64>() / gains.len() as f64);
        }
    }
    if rows.is_empty() {
        return Err(Error::Precondition(
            "no case has two or more images to learn image values from".into(),
        ));
    }
    let n = rows.len();
    let x = DMatrix::from_fn(n, FEATURE_WIDTH + 1, |r, c| {
        if c == FEATURE_WIDTH {
            1.0
        } else {
            rows[r][c]
        }
    });
    let y = DVector::from_vec(targets);
    let mut gram = x.transpose() * &x;
    for i in 0..=FEATURE_WIDTH {
        gram[(i, i)] += RIDGE * n as f64;
    }
    let rhs = x.transpose() * y;
    let w = gram
        .cholesky()
        .ok_or_else(|| Error::Training {
            step: 0,
            message: "image value regression is singular".into(),
        })?
        .solve(&rhs);
    Ok(ImageValueModel {
        weights: w.iter().copied().collect(),
        training_rows: n,
    })
}

/// Held-out check of an image value model: for each case with at least two
/// images, every prefix of a seeded random image order, with metadata masked
/// as in training. Yields `(predicted, realized, flipped)` for adding the next
/// image, where the prediction is for that image's view and `flipped` marks a
/// label entering the top 3.
pub fn image_value_pairs(
    cases: &[Case],
    model: &dyn Classifier,
    schema: &MetadataSchema,
    ivm: &ImageValueModel,
    seed: u64,
) -> Result<Vec<(f64, f64, bool)>> {
    let per_case: Vec<Vec<(f64, f64, bool)>> = cases
        .par_iter()
        .filter(|c| c.images.len() >= 2)
        .map(|case| {
            let mut rng = stream(seed, &format!("ivm-check:{}", case.case_id));
            let mut order: Vec<usize> = (0..case.images.len()).collect();
            order.shuffle(&mut rng);
            let mut out = Vec::new();
            for prefix in 1..order.len() {
                let mut answers = Answers::new();
                for f in schema.fields() {
                    if rng.random_bool(META_KEEP_PROB) {
                        answers.insert(f.id, case.metadata[f.id]);
                    }
                }
                let slices = |k: usize| {
                    order[..k]
                        .iter()
                        .map(|&i| case.images[i].embedding.as_slice())
                        .collect::<Vec<_>>()
                };
                let held: Vec<(ViewType, &[f64])> = order[..prefix]
                    .iter()
                    .map(|&i| (case.images[i].view, case.images[i].embedding.as_slice()))
                    .collect();
                let before = model.predict(&slices(prefix), &answers, schema)?;
                let after = model.predict(&slices(prefix + 1), &answers, schema)?;
                let predicted = ivm.predict(
                    &before,
                    &held,
                    answers.len(),
                    Some(case.images[order[prefix]].view),
                );
                let realized = before.cross_entropy(case.label) - after.cross_entropy(case.label);
                let flipped = !before.in_top_k(case.label, 3) && after.in_top_k(case.label, 3);
                out.push((predicted, realized, flipped));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_case.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn any_view_features_spread_evenly() {
        let p = PredictiveDistribution::new(vec![0.5, 0.3, 0.2]).unwrap();
        let held: [(ViewType, &[f64]); 2] =
            [(ViewType::Near, &[1.0, 0.0]), (ViewType::Near, &[3.0, 0.0])];
        let f = image_features(&p, &held, 1, None);
        assert_eq!(&f[6..9], &[1.0 / 3.0; 3]);
        assert!((f[3] - 0.2).abs() < 1e-12);
        assert_eq!(&f[14..17], &[1.0, 0.0, 0.0]);
        assert!((f[17] - 0.5).abs() < 1e-12);
        let g = image_features(&p, &held, 1, Some(ViewType::Far));
        assert_eq!(&g[6..9], &[0.0, 1.0, 0.0]);
        assert_eq!(&g[19..22], &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn prediction_is_affine_in_features() {
        let mut weights = vec![0.0; FEATURE_WIDTH + 1];
        weights[0] = 2.0;
        weights[FEATURE_WIDTH] = -0.5;
        let m = ImageValueModel {
            weights,
            training_rows: 0,
        };
        let p = PredictiveDistribution::uniform(4);
        assert!((m.predict(&p, &[(ViewType::Near, &[0.0])], 0, None) - 3.5).abs() < 1e-12);
    }
}
