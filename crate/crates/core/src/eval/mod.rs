//! Accuracy metrics, interaction curves, histograms and behavior statistics.

pub mod special;
mod stats;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use stats::{
    anova_f, average_ranks, chi_square_question_frequency, spearman, Anova, ChiSquare, Spearman,
};

use crate::distribution::PredictiveDistribution;
use crate::engine::EpisodeTranscript;
use crate::error::{Error, Result};

pub fn topk_accuracy(
    predictions: &[&PredictiveDistribution],
    labels: &[usize],
    k: usize,
) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::CaseMismatch(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p.in_top_k(**l, k))
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

pub fn final_accuracy(
    transcripts: &[EpisodeTranscript],
    labels: &[usize],
    k: usize,
) -> Result<f64> {
    let preds: Vec<&PredictiveDistribution> =
        transcripts.iter().map(|t| t.final_prediction()).collect();
    topk_accuracy(&preds, labels, k)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n_interactions: usize,
    pub top_k: f64,
    /// Cases whose episode had not yet ended before this point.
    pub n_cases_contributing: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub points: Vec<CurvePoint>,
    /// Trapezoid area with the interaction axis scaled to [0, 1].
    pub auc: f64,
}

/// Top-k after `n` interactions for every `n` up to the longest episode;
/// finished episodes keep contributing their final prediction.
pub fn interaction_curve(
    transcripts: &[EpisodeTranscript],
    labels: &[usize],
    k: usize,
) -> Result<Curve> {
    if transcripts.len() != labels.len() {
        return Err(Error::CaseMismatch(format!(
            "{} transcripts for {} labels",
            transcripts.len(),
            labels.len()
        )));
    }
    let per_case: Vec<Vec<&PredictiveDistribution>> = transcripts
        .iter()
        .map(|t| t.predictions_by_interaction())
        .collect();
    let max_n = per_case.iter().map(|p| p.len() - 1).max().unwrap_or(0);
    let mut points = Vec::with_capacity(max_n + 1);
    for n in 0..=max_n {
        let preds: Vec<&PredictiveDistribution> =
            per_case.iter().map(|p| p[n.min(p.len() - 1)]).collect();
        points.push(CurvePoint {
            n_interactions: n,
            top_k: topk_accuracy(&preds, labels, k)?,
            n_cases_contributing: per_case.iter().filter(|p| p.len() > n).count(),
        });
    }
    let auc = if max_n == 0 {
        points.first().map_or(0.0, |p| p.top_k)
    } else {
        points
            .windows(2)
            .map(|w| (w[0].top_k + w[1].top_k) / 2.0)
            .sum::<f64>()
            / max_n as f64
    };
    Ok(Curve { points, auc })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    Images,
    Metadata,
    Total,
}

/// Number of cases per acquired-input count.
pub fn input_histogram(
    transcripts: &[EpisodeTranscript],
    kind: InputKind,
) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for t in transcripts {
        let n = match kind {
            InputKind::Images => t.num_images(),
            InputKind::Metadata => t.num_metadata(),
            InputKind::Total => t.num_inputs(),
        };
        *h.entry(n).or_insert(0) += 1;
    }
    h
}

/// Population variance of the histogram's counts.
pub fn histogram_variance(h: &BTreeMap<usize, usize>) -> f64 {
    let n: usize = h.values().sum();
    if n == 0 {
        return 0.0;
    }
    let mean = h.iter().map(|(k, c)| (*k * *c) as f64).sum::<f64>() / n as f64;
    h.iter()
        .map(|(k, c)| *c as f64 * (*k as f64 - mean).powi(2))
        .sum::<f64>()
        / n as f64
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Median with the midpoint convention for even lengths.
pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// Ask counts per group and overall: `groups[i]` is the group of
/// transcript `i`.
pub fn question_frequency(
    transcripts: &[EpisodeTranscript],
    groups: &[usize],
    n_groups: usize,
    n_fields: usize,
) -> Result<(Vec<Vec<u64>>, Vec<u64>)> {
    if transcripts.len() != groups.len() {
        return Err(Error::CaseMismatch(format!(
            "{} transcripts for {} groups",
            transcripts.len(),
            groups.len()
        )));
    }
    let mut per = vec![vec![0u64; n_fields]; n_groups];
    let mut all = vec![0u64; n_fields];
    for (t, g) in transcripts.iter().zip(groups) {
        for f in t.fields_asked() {
            per[*g][f] += 1;
            all[f] += 1;
        }
    }
    Ok((per, all))
}
