//! Chunked-prefill eviction simulation.
//!
//! Tokens arrive in fixed-size chunks. Inside a chunk every new token attends
//! (per layer and head) to the tokens the layer still retains plus its
//! in-chunk predecessors, and the resulting head-mean attention is added to
//! each attended token's running importance. At every chunk boundary a layer
//! keeps its `B^(l)` most important tokens; evicted tokens never return.
//!
//! Each layer reads its Q/K/V from the unpruned trace, so the effect of
//! eviction on later layers' hidden states is not modelled.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::{ratios_to_counts, LayerBudgetPlan};
use crate::error::{Error, Result};
use crate::importance::{dot, importance, softmax_in_place, top_indices, value_norms, Scorer, ValueNormMode};
use crate::trace::{AttentionTrace, TraceHeader};

pub const DEFAULT_CHUNK_SIZE: usize = 1024;

/// Which keys a token's softmax is normalized over during a chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    /// Retained tokens plus in-chunk predecessors.
    #[default]
    VisibleSet,
    /// All tokens `0..=i`, as if nothing had been evicted; only tokens still
    /// retained accumulate importance.
    FullContextReplay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefillConfig {
    pub chunk_size: usize,
    pub scorer: Scorer,
    pub attention: AttentionMode,
}

impl Default for PrefillConfig {
    fn default() -> Self {
        Self {
            chunk_size: DEFAULT_CHUNK_SIZE,
            scorer: Scorer::H2o,
            attention: AttentionMode::VisibleSet,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCache {
    pub layer: usize,
    pub budget: usize,
    /// Retained token indices, ascending.
    pub retained: Vec<usize>,
    /// Final importance of each retained token, aligned with `retained`.
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunedCache {
    pub layers: Vec<LayerCache>,
    pub seen_tokens: usize,
    /// Stored scalars per layer, `|S^(l)| · H · (d_k + d_v)`.
    pub kv_entries: Vec<usize>,
}

fn simulate_layer(
    trace: &AttentionTrace,
    layer: usize,
    budget: usize,
    config: &PrefillConfig,
) -> Result<LayerCache> {
    let h = trace.header();
    let n = h.seq_len;
    let scale = 1.0 / (h.key_dim as f64).sqrt();
    let inv_heads = 1.0 / h.num_heads as f64;
    let norms = match config.scorer.p_norm() {
        Some(p) => Some(value_norms(trace, layer, p, ValueNormMode::HeadMeanVector)?),
        None => None,
    };
    let key_of = |acc: &[f64], j: usize| match &norms {
        Some(v) => acc[j] * v[j],
        None => acc[j],
    };

    let mut acc = vec![0.0; n];
    let mut retained: Vec<usize> = Vec::new();
    let mut row = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let end = (start + config.chunk_size).min(n);
        let mut visible = retained.clone();
        visible.extend(start..end);
        let kept = retained.len();
        for i in start..end {
            let vis = &visible[..kept + (i - start) + 1];
            for head in 0..h.num_heads {
                let q = trace.query(layer, head, i);
                match config.attention {
                    AttentionMode::VisibleSet => {
                        let r = &mut row[..vis.len()];
                        for (a, &j) in r.iter_mut().zip(vis) {
                            *a = dot(q, trace.key(layer, head, j)) * scale;
                        }
                        softmax_in_place(r);
                        for (a, &j) in r[..vis.len() - 1].iter().zip(vis) {
                            acc[j] += a * inv_heads;
                        }
                    }
                    AttentionMode::FullContextReplay => {
                        let r = &mut row[..=i];
                        for (j, a) in r.iter_mut().enumerate() {
                            *a = dot(q, trace.key(layer, head, j)) * scale;
                        }
                        softmax_in_place(r);
                        for &j in &vis[..vis.len() - 1] {
                            acc[j] += r[j] * inv_heads;
                        }
                    }
                }
            }
        }
        if visible.len() > budget {
            let keys: Vec<f64> = visible.iter().map(|&j| key_of(&acc, j)).collect();
            retained = top_indices(&keys, budget).into_iter().map(|k| visible[k]).collect();
        } else {
            retained = visible;
        }
        start = end;
    }
    let scores = retained.iter().map(|&j| key_of(&acc, j)).collect();
    Ok(LayerCache {
        layer,
        budget,
        retained,
        scores,
    })
}

/// Simulate with explicit per-layer budgets.
pub fn run_chunked_prefill_with_counts(
    trace: &AttentionTrace,
    counts: &[usize],
    config: &PrefillConfig,
) -> Result<PrunedCache> {
    let h = *trace.header();
    if counts.len() != h.num_layers {
        return Err(Error::ShapeMismatch(format!(
            "{} budgets for a {}-layer trace",
            counts.len(),
            h.num_layers
        )));
    }
    if let Some((l, &b)) = counts.iter().enumerate().find(|(_, &b)| b > h.seq_len) {
        return Err(Error::invalid(format!("layer {l} budget {b} exceeds {} tokens", h.seq_len)));
    }
    if config.chunk_size == 0 {
        return Err(Error::invalid("chunk_size must be at least 1"));
    }
    let layers = counts
        .par_iter()
        .enumerate()
        .map(|(layer, &budget)| simulate_layer(trace, layer, budget, config))
        .collect::<Result<Vec<_>>>()?;
    let per_token = h.num_heads * (h.key_dim + h.value_dim);
    let kv_entries = layers.iter().map(|l| l.retained.len() * per_token).collect();
    Ok(PrunedCache {
        layers,
        seen_tokens: h.seq_len,
        kv_entries,
    })
}

/// Simulate with the budgets `ratios_to_counts(plan, N)`.
pub fn run_chunked_prefill(
    trace: &AttentionTrace,
    plan: &LayerBudgetPlan,
    config: &PrefillConfig,
) -> Result<PrunedCache> {
    if plan.num_layers != trace.header().num_layers || plan.ratios.len() != plan.num_layers {
        return Err(Error::ShapeMismatch(format!(
            "plan has {} layers, trace has {}",
            plan.num_layers,
            trace.header().num_layers
        )));
    }
    let counts = ratios_to_counts(plan, trace.header().seq_len);
    run_chunked_prefill_with_counts(trace, &counts.counts, config)
}

/// Number of stored scalars `Σ_l |S^(l)| · H · (d_k + d_v)`.
pub fn memory_footprint(cache: &PrunedCache, header: &TraceHeader) -> usize {
    cache.layers.iter().map(|l| l.retained.len()).sum::<usize>() * header.num_heads * (header.key_dim + header.value_dim)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl ScoreSummary {
    fn of(scores: &[f64]) -> Self {
        if scores.is_empty() {
            return Self {
                min: 0.0,
                max: 0.0,
                mean: 0.0,
            };
        }
        Self {
            min: scores.iter().copied().fold(f64::INFINITY, f64::min),
            max: scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean: scores.iter().sum::<f64>() / scores.len() as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub budget: usize,
    pub retained: Vec<usize>,
    pub score_summary: ScoreSummary,
    /// Jaccard overlap with the top-`budget` set of full-sequence scores;
    /// present in plan comparisons.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jaccard_vs_full: Option<f64>,
}

/// JSON report of one simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefillReport {
    pub plan_name: String,
    pub per_layer: Vec<LayerReport>,
    pub footprint_entries: usize,
    pub seen_tokens: usize,
}

impl PrefillReport {
    pub fn new(plan_name: impl Into<String>, cache: &PrunedCache, header: &TraceHeader) -> Self {
        Self {
            plan_name: plan_name.into(),
            per_layer: cache
                .layers
                .iter()
                .map(|l| LayerReport {
                    layer: l.layer,
                    budget: l.budget,
                    retained: l.retained.clone(),
                    score_summary: ScoreSummary::of(&l.scores),
                    jaccard_vs_full: None,
                })
                .collect(),
            footprint_entries: memory_footprint(cache, header),
            seen_tokens: cache.seen_tokens,
        }
    }

    pub fn mean_jaccard(&self) -> Option<f64> {
        let js: Option<Vec<f64>> = self.per_layer.iter().map(|l| l.jaccard_vs_full).collect();
        js.map(|v| v.iter().sum::<f64>() / v.len().max(1) as f64)
    }
}

pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    // Both inputs are sorted ascending without duplicates.
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Run every named plan over the same trace and compare the outcomes.
pub fn compare_plans(
    trace: &AttentionTrace,
    plans: &[(String, LayerBudgetPlan)],
    config: &PrefillConfig,
) -> Result<Vec<PrefillReport>> {
    let Some((_, first)) = plans.first() else {
        return Ok(Vec::new());
    };
    for (name, p) in plans {
        if p.num_layers != first.num_layers || (p.global_ratio - first.global_ratio).abs() > 1e-12 {
            return Err(Error::ShapeMismatch(format!(
                "plan {name:?} differs from {:?} in layer count or global ratio",
                plans[0].0
            )));
        }
    }
    let header = *trace.header();
    let full: Vec<Vec<f64>> = (0..header.num_layers)
        .into_par_iter()
        .map(|l| importance(trace, l, config.scorer).map(|s| s.scores))
        .collect::<Result<_>>()?;
    plans
        .iter()
        .map(|(name, plan)| {
            let cache = run_chunked_prefill(trace, plan, config)?;
            let mut report = PrefillReport::new(name.clone(), &cache, &header);
            for (lr, scores) in report.per_layer.iter_mut().zip(&full) {
                let reference = top_indices(scores, lr.budget);
                lr.jaccard_vs_full = Some(jaccard(&lr.retained, &reference));
            }
            Ok(report)
        })
        .collect()
}
