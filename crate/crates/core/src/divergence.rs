//! Distances between predictive distributions used to score how much a
//! hypothetical answer would move the current prediction.
//!
//! KL is reported in nats; the JS distance and the entropy difference use
//! base-2 logarithms.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distribution::PredictiveDistribution;
use crate::error::{Error, Result};

/// Floor applied to both KL arguments before renormalizing.
pub const KL_EPSILON: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Kl,
    Js,
    Entropy,
}

impl MetricKind {
    pub const ALL: [MetricKind; 3] = [MetricKind::Kl, MetricKind::Js, MetricKind::Entropy];

    pub fn token(self) -> &'static str {
        match self {
            MetricKind::Kl => "kl",
            MetricKind::Js => "js",
            MetricKind::Entropy => "entropy",
        }
    }

    /// Distance from the current prediction to a hypothetical one.
    pub fn distance(
        self,
        current: &PredictiveDistribution,
        new: &PredictiveDistribution,
    ) -> Result<f64> {
        let (p, q) = (current.probs(), new.probs());
        match self {
            MetricKind::Kl => kl(p, q),
            MetricKind::Js => js_distance(p, q),
            MetricKind::Entropy => entropy_diff(p, q),
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kl" => Ok(MetricKind::Kl),
            "js" => Ok(MetricKind::Js),
            "entropy" => Ok(MetricKind::Entropy),
            _ => Err(Error::Config(format!(
                "unknown metric `{s}` (expected kl|js|entropy)"
            ))),
        }
    }
}

fn check_len(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            got: q.len(),
        });
    }
    Ok(())
}

fn clamp_renormalize(p: &[f64]) -> Vec<f64> {
    let clamped: Vec<f64> = p.iter().map(|x| x.max(KL_EPSILON)).collect();
    let s: f64 = clamped.iter().sum();
    clamped.into_iter().map(|x| x / s).collect()
}

/// KL(p ‖ q) in nats, after flooring both arguments at [`KL_EPSILON`].
pub fn kl(p: &[f64], q: &[f64]) -> Result<f64> {
    check_len(p, q)?;
    let (p, q) = (clamp_renormalize(p), clamp_renormalize(q));
    let d: f64 = p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum();
    Ok(d.max(0.0))
}

fn kl2_unclamped(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).log2())
        .sum()
}

/// Jensen-Shannon distance (square root of the base-2 JS divergence).
pub fn js_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    check_len(p, q)?;
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let jsd = 0.5 * kl2_unclamped(p, &m) + 0.5 * kl2_unclamped(q, &m);
    Ok(jsd.clamp(0.0, 1.0).sqrt())
}

pub fn entropy_bits(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|x| **x > 0.0)
        .map(|x| x * x.log2())
        .sum::<f64>()
}

/// |H(p) − H(q)| in bits.
pub fn entropy_diff(p: &[f64], q: &[f64]) -> Result<f64> {
    check_len(p, q)?;
    Ok((entropy_bits(p) - entropy_bits(q)).abs())
}
