//! Layer-sensitivity statistics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::trace::ScoreTable;

pub const DEFAULT_PERMUTATIONS: usize = 10_000;

/// Relative slack when counting permuted statistics `≥` the observed one.
const TIE_TOLERANCE: f64 = 1e-12;

/// How layer labels are shuffled under the null.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PermutationScheme {
    /// Shuffle layer labels independently within each sample.
    #[default]
    WithinSample,
    /// Pool every cell of the table and shuffle globally.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    #[serde(rename = "observed")]
    pub observed_stat: f64,
    pub p_value: f64,
    pub effect_size: f64,
    pub n_perm: usize,
    pub seed: u64,
    /// Permuted statistics at least as large as the observed one.
    #[serde(skip)]
    pub exceedances: usize,
}

/// Population variance (divide by `n`).
pub fn population_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

fn between_layer_variance(rows: &[Vec<f64>]) -> f64 {
    let layers = rows[0].len();
    let mut means = vec![0.0; layers];
    for row in rows {
        for (m, v) in means.iter_mut().zip(row) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= rows.len() as f64);
    population_variance(&means)
}

/// Monte Carlo permutation test of the variance of per-layer means.
pub fn permutation_test(table: &ScoreTable, n_perm: usize, seed: u64) -> Result<PermutationResult> {
    permutation_test_with(table, n_perm, seed, PermutationScheme::default())
}

pub fn permutation_test_with(
    table: &ScoreTable,
    n_perm: usize,
    seed: u64,
    scheme: PermutationScheme,
) -> Result<PermutationResult> {
    if table.num_layers() < 2 {
        return Err(Error::invalid("permutation test needs at least 2 layers"));
    }
    if n_perm == 0 {
        return Err(Error::invalid("n_perm must be at least 1"));
    }
    let rows = table.rows();
    let observed = between_layer_variance(rows);
    let layers = table.num_layers();
    let null: Vec<f64> = (0..n_perm as u64)
        .into_par_iter()
        .map(|r| {
            let mut cursor = CounterRng::new(seed, r).cursor();
            let mut permuted = rows.to_vec();
            match scheme {
                PermutationScheme::WithinSample => {
                    for row in &mut permuted {
                        cursor.shuffle(row);
                    }
                }
                PermutationScheme::Global => {
                    let mut flat: Vec<f64> = permuted.concat();
                    cursor.shuffle(&mut flat);
                    for (row, chunk) in permuted.iter_mut().zip(flat.chunks(layers)) {
                        row.copy_from_slice(chunk);
                    }
                }
            }
            between_layer_variance(&permuted)
        })
        .collect();
    let threshold = observed - TIE_TOLERANCE * observed.abs();
    let exceedances = null.iter().filter(|&&s| s >= threshold).count();
    let p_value = (exceedances + 1) as f64 / (n_perm + 1) as f64;
    let null_mean = null.iter().sum::<f64>() / n_perm as f64;
    let null_std = population_variance(&null).sqrt();
    let effect_size = if null_std > 0.0 {
        (observed - null_mean) / null_std
    } else {
        0.0
    };
    Ok(PermutationResult {
        observed_stat: observed,
        p_value,
        effect_size,
        n_perm,
        seed,
        exceedances,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub coefficient: f64,
    pub p_value: f64,
    pub n: usize,
}

/// Two-sided Student-t tail probability `P(|T| ≥ |t|)` with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    beta_reg(df / 2.0, 0.5, df / (df + t * t))
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!("lengths {} and {} differ", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::invalid("correlation needs at least 3 pairs"));
    }
    if let Some(index) = x.iter().chain(y).position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    Ok(())
}

/// Product-moment correlation with a t-transform p-value. A perfect
/// correlation reports `f64::MIN_POSITIVE` as its p-value.
const PERFECT_SLACK: f64 = 1e-14;

pub fn pearson(x: &[f64], y: &[f64]) -> Result<CorrelationResult> {
    check_pair(x, y)?;
    let n = x.len();
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("zero variance".into()));
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    // Exactly linear data lands a few ulps short of ±1 after centring.
    let r = if 1.0 - r.abs() < PERFECT_SLACK { r.signum() } else { r };
    let p_value = if r.abs() >= 1.0 {
        f64::MIN_POSITIVE
    } else {
        let df = (n - 2) as f64;
        let t = r * (df / (1.0 - r * r)).sqrt();
        student_t_two_sided(t, df).clamp(f64::MIN_POSITIVE, 1.0)
    };
    Ok(CorrelationResult {
        coefficient: r,
        p_value,
        n,
    })
}

/// 1-based ranks, ties sharing their mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<CorrelationResult> {
    check_pair(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Output tokens beyond the baseline length.
pub fn yapscore(length: u64, baseline: u64) -> u64 {
    length.saturating_sub(baseline)
}

/// Standardize with the population standard deviation.
pub fn zscore(values: &[f64]) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(Error::invalid("z-score needs at least 2 values"));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let std = population_variance(values).sqrt();
    if std == 0.0 {
        return Err(Error::Degenerate("zero standard deviation".into()));
    }
    Ok(values.iter().map(|v| (v - mean) / std).collect())
}
