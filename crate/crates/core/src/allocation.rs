//! Per-layer pruning ratios under a fixed global budget.
//!
//! Every plan satisfies `(1/L) Σ ρ^(l) = ρ`. Layer indices are 0-based; the
//! "middle" layers of an `L`-layer model are `⌊L/2⌋` and `⌊L/2⌋ + 1`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_GLOBAL_RATIO: f64 = 0.6;
pub const DEFAULT_RHO_MAX: f64 = 0.7;
pub const DEFAULT_SCORE_EPSILON: f64 = 1e-9;

const FEASIBILITY_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Uniform,
    /// Middle-layer protection.
    Mlp,
    /// Metric-guided allocation.
    Mga,
    /// Middle-layer protection plus metric-guided allocation over the rest,
    /// protecting `middle` layers.
    Mlma { middle: usize },
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Uniform => f.write_str("uniform"),
            Strategy::Mlp => f.write_str("mlp"),
            Strategy::Mga => f.write_str("mga"),
            Strategy::Mlma { middle } => write!(f, "mlma-{middle}"),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Strategy::Uniform),
            "mlp" => Ok(Strategy::Mlp),
            "mga" => Ok(Strategy::Mga),
            _ => s
                .strip_prefix("mlma-")
                .and_then(|m| m.parse().ok())
                .map(|middle| Strategy::Mlma { middle })
                .ok_or_else(|| Error::invalid(format!("unknown strategy {s:?}"))),
        }
    }
}

impl Serialize for Strategy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Strategy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Maps a per-layer metric to non-negative robustness scores over the pruned layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreTransform {
    /// `s = metric − min(metric over pruned) + epsilon`.
    MinShift { epsilon: f64 },
    /// `s = metric`; values must be non-negative.
    Identity,
}

impl Default for ScoreTransform {
    fn default() -> Self {
        ScoreTransform::MinShift {
            epsilon: DEFAULT_SCORE_EPSILON,
        }
    }
}

impl ScoreTransform {
    pub fn apply(self, metric: &[f64]) -> Result<Vec<f64>> {
        match self {
            ScoreTransform::MinShift { epsilon } => {
                let min = metric.iter().copied().fold(f64::INFINITY, f64::min);
                Ok(metric.iter().map(|m| m - min + epsilon).collect())
            }
            ScoreTransform::Identity => {
                if metric.iter().any(|&m| m < 0.0) {
                    return Err(Error::invalid("identity transform needs non-negative scores"));
                }
                Ok(metric.to_vec())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBudgetPlan {
    pub strategy: Strategy,
    pub num_layers: usize,
    pub global_ratio: f64,
    pub rho_max: f64,
    pub ratios: Vec<f64>,
    pub protected: Vec<usize>,
}

impl LayerBudgetPlan {
    pub fn mean_ratio(&self) -> f64 {
        self.ratios.iter().sum::<f64>() / self.num_layers as f64
    }

    /// Serializable record with the integer counts for a sequence of `seq_len` tokens.
    pub fn record(&self, seq_len: usize) -> PlanRecord {
        PlanRecord {
            strategy: self.strategy,
            num_layers: self.num_layers,
            rho: self.global_ratio,
            rho_max: self.rho_max,
            ratios: self.ratios.clone(),
            protected: self.protected.clone(),
            counts: ratios_to_counts(self, seq_len).counts,
        }
    }
}

/// JSON form of a plan: `{strategy, L, rho, rho_max, ratios, protected, counts}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub strategy: Strategy,
    #[serde(rename = "L")]
    pub num_layers: usize,
    pub rho: f64,
    pub rho_max: f64,
    pub ratios: Vec<f64>,
    pub protected: Vec<usize>,
    pub counts: Vec<usize>,
}

impl PlanRecord {
    pub fn plan(&self) -> LayerBudgetPlan {
        LayerBudgetPlan {
            strategy: self.strategy,
            num_layers: self.num_layers,
            global_ratio: self.rho,
            rho_max: self.rho_max,
            ratios: self.ratios.clone(),
            protected: self.protected.clone(),
        }
    }
}

fn check_common(num_layers: usize, rho: f64) -> Result<()> {
    if num_layers == 0 {
        return Err(Error::invalid("at least one layer is required"));
    }
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::invalid(format!("global ratio {rho} outside [0, 1)")));
    }
    Ok(())
}

fn check_rho_max(rho_max: f64) -> Result<()> {
    if !(rho_max > 0.0 && rho_max <= 1.0) {
        return Err(Error::invalid(format!("rho_max {rho_max} outside (0, 1]")));
    }
    Ok(())
}

/// Spread `L·ρ` evenly over the layers not in `protected`.
fn even_plan(strategy: Strategy, num_layers: usize, rho: f64, protected: Vec<usize>) -> Result<LayerBudgetPlan> {
    let pruned = num_layers - protected.len();
    let mass = num_layers as f64 * rho;
    let mut ratios = vec![0.0; num_layers];
    if mass > 0.0 {
        let per_layer = mass / pruned as f64;
        if pruned == 0 || per_layer > 1.0 + FEASIBILITY_SLACK {
            return Err(Error::Infeasible(format!(
                "{strategy}: L·ρ = {mass} over {pruned} pruned layers needs per-layer ratio {per_layer} > 1"
            )));
        }
        for (l, r) in ratios.iter_mut().enumerate() {
            if !protected.contains(&l) {
                *r = per_layer.min(1.0);
            }
        }
    }
    Ok(LayerBudgetPlan {
        strategy,
        num_layers,
        global_ratio: rho,
        rho_max: DEFAULT_RHO_MAX,
        ratios,
        protected,
    })
}

pub fn uniform_plan(num_layers: usize, rho: f64) -> Result<LayerBudgetPlan> {
    uniform_plan_with(num_layers, rho, false)
}

/// Uniform baseline; `exempt_first` keeps layer 0 unpruned and spreads the
/// budget over the remaining layers.
pub fn uniform_plan_with(num_layers: usize, rho: f64, exempt_first: bool) -> Result<LayerBudgetPlan> {
    check_common(num_layers, rho)?;
    let protected = if exempt_first { vec![0] } else { Vec::new() };
    even_plan(Strategy::Uniform, num_layers, rho, protected)
}

/// The `middle` layers centred on `⌊L/2⌋` and `⌊L/2⌋ + 1`.
fn middle_layers(num_layers: usize, middle: usize) -> Vec<usize> {
    let mid = num_layers / 2;
    let half = middle / 2;
    (mid + 1 - half..=mid + half).collect()
}

pub fn mlp_plan(num_layers: usize, rho: f64) -> Result<LayerBudgetPlan> {
    check_common(num_layers, rho)?;
    if num_layers < 4 {
        return Err(Error::invalid("middle-layer protection needs at least 4 layers"));
    }
    let mut protected = vec![0];
    protected.extend(middle_layers(num_layers, 2));
    even_plan(Strategy::Mlp, num_layers, rho, protected)
}

/// Proportional split of `total` by `weights` with every share capped at
/// `cap`. Excess above the cap is redistributed proportionally among the
/// uncapped entries until no entry exceeds the cap. Callers guarantee
/// `total ≤ cap · weights.len()`.
pub fn capped_proportional(total: f64, weights: &[f64], cap: f64) -> Vec<f64> {
    let n = weights.len();
    let mut out = vec![0.0; n];
    let mut saturated = vec![false; n];
    let mut n_saturated = 0usize;
    while n_saturated < n {
        let capped: f64 = (0..n).filter(|&i| saturated[i]).map(|i| out[i]).sum();
        let remaining = (total - capped).max(0.0);
        let free: Vec<usize> = (0..n).filter(|&i| !saturated[i]).collect();
        let wsum: f64 = free.iter().map(|&i| weights[i]).sum();
        for &i in &free {
            out[i] = if wsum > 0.0 {
                remaining * weights[i] / wsum
            } else {
                remaining / free.len() as f64
            };
        }
        let mut changed = false;
        for &i in &free {
            // Shares within rounding of the cap are pinned to it.
            if out[i] > cap - FEASIBILITY_SLACK {
                out[i] = cap;
                saturated[i] = true;
                n_saturated += 1;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    out
}

/// Metric-guided split of `L·ρ` over the layers outside `protected`.
fn metric_plan(
    strategy: Strategy,
    num_layers: usize,
    rho: f64,
    metric: &[f64],
    protected: Vec<usize>,
    rho_max: f64,
    transform: ScoreTransform,
) -> Result<LayerBudgetPlan> {
    if metric.len() != num_layers {
        return Err(Error::ShapeMismatch(format!(
            "metric has {} values for {num_layers} layers",
            metric.len()
        )));
    }
    if let Some(index) = metric.iter().position(|m| !m.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let pruned: Vec<usize> = (0..num_layers).filter(|l| !protected.contains(l)).collect();
    let mass = num_layers as f64 * rho;
    let capacity = rho_max * pruned.len() as f64;
    if mass > capacity + FEASIBILITY_SLACK {
        return Err(Error::Infeasible(format!(
            "{strategy}: L·ρ = {mass} exceeds rho_max·|pruned| = {capacity}"
        )));
    }
    let pruned_metric: Vec<f64> = pruned.iter().map(|&l| metric[l]).collect();
    let scores = transform.apply(&pruned_metric)?;
    let shares = capped_proportional(mass.min(capacity), &scores, rho_max);
    let mut ratios = vec![0.0; num_layers];
    for (&l, s) in pruned.iter().zip(shares) {
        ratios[l] = s;
    }
    Ok(LayerBudgetPlan {
        strategy,
        num_layers,
        global_ratio: rho,
        rho_max,
        ratios,
        protected,
    })
}

pub fn mga_plan(num_layers: usize, rho: f64, metric: &[f64], rho_max: f64) -> Result<LayerBudgetPlan> {
    mga_plan_with(num_layers, rho, metric, rho_max, ScoreTransform::default())
}

pub fn mga_plan_with(
    num_layers: usize,
    rho: f64,
    metric: &[f64],
    rho_max: f64,
    transform: ScoreTransform,
) -> Result<LayerBudgetPlan> {
    check_common(num_layers, rho)?;
    check_rho_max(rho_max)?;
    if num_layers < 2 {
        return Err(Error::invalid("metric-guided allocation needs at least 2 layers"));
    }
    metric_plan(Strategy::Mga, num_layers, rho, metric, vec![0], rho_max, transform)
}

pub fn mlma_plan(num_layers: usize, rho: f64, metric: &[f64], middle: usize, rho_max: f64) -> Result<LayerBudgetPlan> {
    mlma_plan_with(num_layers, rho, metric, middle, rho_max, ScoreTransform::default())
}

pub fn mlma_plan_with(
    num_layers: usize,
    rho: f64,
    metric: &[f64],
    middle: usize,
    rho_max: f64,
    transform: ScoreTransform,
) -> Result<LayerBudgetPlan> {
    check_common(num_layers, rho)?;
    check_rho_max(rho_max)?;
    if middle == 0 || !middle.is_multiple_of(2) {
        return Err(Error::invalid(format!("middle layer count {middle} must be a positive even number")));
    }
    if num_layers <= middle + 1 {
        return Err(Error::invalid(format!(
            "{num_layers} layers cannot protect layer 0 plus {middle} middle layers"
        )));
    }
    let mut protected = vec![0];
    protected.extend(middle_layers(num_layers, middle));
    metric_plan(Strategy::Mlma { middle }, num_layers, rho, metric, protected, rho_max, transform)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCounts {
    pub counts: Vec<usize>,
    pub total: usize,
}

/// Integer retained counts `B^(l)` for `seq_len` tokens.
///
/// The total is `round(Σ (1 − ρ^(l))·N)`; per-layer targets are apportioned
/// by largest remainder (ties to the lower index). Layers left at zero are
/// raised to one, taking the token from the layer with the largest count.
/// The total is raised to `L` when it would be smaller.
pub fn ratios_to_counts(plan: &LayerBudgetPlan, seq_len: usize) -> LayerCounts {
    let n = seq_len as f64;
    let targets: Vec<f64> = plan
        .ratios
        .iter()
        .map(|r| {
            let t = ((1.0 - r) * n).clamp(0.0, n);
            // Snap values that are integers up to rounding noise.
            if (t - t.round()).abs() < 1e-9 {
                t.round()
            } else {
                t
            }
        })
        .collect();
    let layers = targets.len();
    let total = (targets.iter().sum::<f64>().round() as usize).max(layers).min(layers * seq_len);
    let mut counts: Vec<usize> = targets.iter().map(|t| t.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..layers).collect();
    order.sort_by(|&a, &b| {
        let ra = targets[a] - targets[a].floor();
        let rb = targets[b] - targets[b].floor();
        if (ra - rb).abs() <= 1e-12 {
            a.cmp(&b)
        } else {
            rb.total_cmp(&ra)
        }
    });
    let mut extra = total.saturating_sub(assigned);
    // Each pass hands out at most one token per layer, never above N.
    while extra > 0 {
        let before = extra;
        for &l in &order {
            if extra == 0 {
                break;
            }
            if counts[l] < seq_len {
                counts[l] += 1;
                extra -= 1;
            }
        }
        if extra == before {
            break;
        }
    }
    for l in 0..layers {
        if counts[l] == 0 {
            let donor = (0..layers)
                .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
                .expect("at least one layer");
            if counts[donor] > 1 {
                counts[donor] -= 1;
                counts[l] = 1;
            }
        }
    }
    LayerCounts {
        total: counts.iter().sum(),
        counts,
    }
}
