use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::special::{chi_square_sf, student_t_two_sided};
use crate::error::{Error, Result};
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spearman {
    pub rho: f64,
    pub p: f64,
    pub n: usize,
}

/// Ranks starting at 1; tied values share their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|a, b| x[*a].total_cmp(&x[*b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Rank correlation with a two-sided p-value from the t approximation.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Spearman> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(Error::Undefined("spearman needs at least 3 pairs".into()));
    }
    let rho = pearson(&average_ranks(x), &average_ranks(y))
        .ok_or_else(|| Error::Undefined("spearman rho is undefined for constant input".into()))?;
    let df = (x.len() - 2) as f64;
    let p = if rho.abs() >= 1.0 {
        0.0
    } else {
        student_t_two_sided(rho * (df / (1.0 - rho * rho)).sqrt(), df)
    };
    Ok(Spearman { rho, p, n: x.len() })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anova {
    /// `inf` when the within-group variance is zero but group means differ.
    #[serde(with = "crate::float_serde")]
    pub f: f64,
    pub p_perm: f64,
    pub permutations: usize,
    pub df_between: usize,
    pub df_within: usize,
}

fn f_statistic(groups: &[&[f64]]) -> f64 {
    let n: usize = groups.iter().map(|g| g.len()).sum();
    let grand = groups.iter().flat_map(|g| g.iter()).sum::<f64>() / n as f64;
    let mut ssb = 0.0;
    let mut ssw = 0.0;
    for g in groups {
        let m = g.iter().sum::<f64>() / g.len() as f64;
        ssb += g.len() as f64 * (m - grand).powi(2);
        ssw += g.iter().map(|x| (x - m).powi(2)).sum::<f64>();
    }
    let k = groups.len();
    let between = ssb / (k - 1) as f64;
    let within = ssw / (n - k) as f64;
    // Guard against rounding noise in sums of squares of identical values.
    let scale = groups
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .max(1.0);
    if ssb <= 1e-12 * scale {
        0.0
    } else if ssw <= 1e-12 * scale {
        f64::INFINITY
    } else {
        between / within
    }
}

/// One-way ANOVA F with a seeded permutation p-value, `(count + 1) /
/// (permutations + 1)` where count is the number of shuffles reaching the
/// observed F.
pub fn anova_f(groups: &[Vec<f64>], permutations: usize, seed: u64) -> Result<Anova> {
    if groups.len() < 2 || groups.iter().any(|g| g.len() < 2) {
        return Err(Error::Undefined(
            "anova needs at least 2 groups of at least 2 values".into(),
        ));
    }
    let slices: Vec<&[f64]> = groups.iter().map(|g| g.as_slice()).collect();
    let observed = f_statistic(&slices);
    let mut pooled: Vec<f64> = groups.iter().flatten().copied().collect();
    let sizes: Vec<usize> = groups.iter().map(|g| g.len()).collect();
    let mut rng = stream(seed, "anova");
    let mut count = 0;
    for _ in 0..permutations {
        pooled.shuffle(&mut rng);
        let mut parts = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for s in &sizes {
            parts.push(&pooled[start..start + s]);
            start += s;
        }
        let f = f_statistic(&parts);
        if f >= observed * (1.0 - 1e-12) {
            count += 1;
        }
    }
    let n: usize = sizes.iter().sum();
    Ok(Anova {
        f: observed,
        p_perm: (count + 1) as f64 / (permutations + 1) as f64,
        permutations,
        df_between: groups.len() - 1,
        df_within: n - groups.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub stat: f64,
    pub df: usize,
    pub p: f64,
    pub significant: bool,
    /// Some cells had zero expected count and were pooled.
    pub pooled: bool,
}

/// Goodness of fit of each group's ask counts against the global ask
/// proportions; significance at `alpha / bonferroni_m`.
pub fn chi_square_question_frequency(
    per_group: &[Vec<u64>],
    global: &[u64],
    alpha: f64,
    bonferroni_m: usize,
) -> Result<Vec<ChiSquare>> {
    let total: u64 = global.iter().sum();
    let cutoff = alpha / bonferroni_m.max(1) as f64;
    per_group
        .iter()
        .map(|obs| {
            if obs.len() != global.len() {
                return Err(Error::DimensionMismatch {
                    expected: global.len(),
                    got: obs.len(),
                });
            }
            let n: u64 = obs.iter().sum();
            let mut cells: Vec<(f64, f64)> = Vec::new();
            let mut pooled = (0.0, 0.0);
            let mut any_pooled = false;
            for (o, g) in obs.iter().zip(global) {
                let e = if total == 0 {
                    0.0
                } else {
                    n as f64 * *g as f64 / total as f64
                };
                if e == 0.0 {
                    pooled.0 += *o as f64;
                    any_pooled = true;
                } else {
                    cells.push((*o as f64, e));
                }
            }
            if any_pooled && pooled.0 > 0.0 {
                // Observed counts where none were expected make the fit impossible.
                return Ok(ChiSquare {
                    stat: f64::INFINITY,
                    df: cells.len(),
                    p: 0.0,
                    significant: true,
                    pooled: true,
                });
            }
            let stat: f64 = cells.iter().map(|(o, e)| (o - e).powi(2) / e).sum();
            let df = cells.len().saturating_sub(1);
            let p = if df == 0 {
                1.0
            } else {
                chi_square_sf(stat, df as f64)
            };
            Ok(ChiSquare {
                stat,
                df,
                p,
                significant: p < cutoff,
                pooled: any_pooled,
            })
        })
        .collect()
}
