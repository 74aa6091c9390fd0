//! Attention weights and token-importance scores.
//!
//! Heads are aggregated by averaging their softmax-normalized attention
//! weights. A token's attention-only (H2O) importance is the attention mass it
//! receives from strictly later tokens; the value-aware variant multiplies
//! that by the p-norm of the token's value vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::AttentionTrace;

/// Lower-triangular `N × N` matrix; entries with `j > i` are masked and not stored.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalMatrix {
    n: usize,
    data: Vec<f64>,
}

impl CausalMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * (n + 1) / 2],
        }
    }

    /// Build from explicit rows; row `i` must hold `i + 1` entries.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let mut m = Self::zeros(rows.len());
        for (i, r) in rows.iter().enumerate() {
            if r.len() != i + 1 {
                return Err(Error::ShapeMismatch(format!("row {i} has {} entries, expected {}", r.len(), i + 1)));
            }
            m.row_mut(i).copy_from_slice(r);
        }
        Ok(m)
    }

    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        let o = i * (i + 1) / 2;
        &self.data[o..o + i + 1]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let o = i * (i + 1) / 2;
        &mut self.data[o..o + i + 1]
    }

    /// Entry `(i, j)`, or `None` when masked.
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        (j <= i && i < self.n).then(|| self.row(i)[j])
    }
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Numerically stable softmax of one row, in place.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

fn check_layer(trace: &AttentionTrace, layer: usize) -> Result<()> {
    let bound = trace.header().num_layers;
    if layer >= bound {
        return Err(Error::IndexOutOfRange {
            what: "layer",
            index: layer,
            bound,
        });
    }
    Ok(())
}

/// Scaled dot-product logits `⟨Q_i, K_j⟩ / √d_k` for `j ≤ i`.
pub fn attention_scores(trace: &AttentionTrace, layer: usize, head: usize) -> Result<CausalMatrix> {
    check_layer(trace, layer)?;
    let h = trace.header();
    if head >= h.num_heads {
        return Err(Error::IndexOutOfRange {
            what: "head",
            index: head,
            bound: h.num_heads,
        });
    }
    let scale = 1.0 / (h.key_dim as f64).sqrt();
    let mut m = CausalMatrix::zeros(h.seq_len);
    for i in 0..h.seq_len {
        let q = trace.query(layer, head, i);
        for (j, a) in m.row_mut(i).iter_mut().enumerate() {
            *a = dot(q, trace.key(layer, head, j)) * scale;
        }
    }
    Ok(m)
}

/// Row-wise causal softmax.
pub fn normalize_attention(logits: &CausalMatrix) -> CausalMatrix {
    let mut out = logits.clone();
    for i in 0..out.n {
        softmax_in_place(out.row_mut(i));
    }
    out
}

/// Head-mean of the normalized attention weights of one layer.
pub fn head_mean_attention(trace: &AttentionTrace, layer: usize) -> Result<CausalMatrix> {
    check_layer(trace, layer)?;
    let heads = trace.header().num_heads;
    let mut mean = CausalMatrix::zeros(trace.header().seq_len);
    for head in 0..heads {
        let alpha = normalize_attention(&attention_scores(trace, layer, head)?);
        for (m, a) in mean.data.iter_mut().zip(&alpha.data) {
            *m += a;
        }
    }
    mean.data.iter_mut().for_each(|m| *m /= heads as f64);
    Ok(mean)
}

/// Column sums strictly below the diagonal: `s_j = Σ_{i>j} α[i][j]`.
pub fn accumulated_attention(weights: &CausalMatrix) -> Vec<f64> {
    let mut s = vec![0.0; weights.n];
    for i in 1..weights.n {
        for (acc, w) in s.iter_mut().zip(&weights.row(i)[..i]) {
            *acc += w;
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    pub layer: usize,
    pub scores: Vec<f64>,
}

impl ImportanceScores {
    /// `token_index,score` CSV with header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("token_index,score\n");
        for (j, s) in self.scores.iter().enumerate() {
            out.push_str(&format!("{j},{s}\n"));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PNorm {
    #[default]
    L1,
    L2,
}

impl PNorm {
    pub fn of(self, v: &[f64]) -> f64 {
        match self {
            PNorm::L1 => v.iter().map(|x| x.abs()).sum(),
            PNorm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        }
    }
}

/// How per-head value vectors collapse to one magnitude per token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValueNormMode {
    /// Norm of the head-mean value vector.
    #[default]
    HeadMeanVector,
    /// Mean over heads of the per-head norms.
    MeanOfHeadNorms,
}

/// Token scoring rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scorer {
    #[default]
    H2o,
    ValueAwareL1,
    ValueAwareL2,
}

impl Scorer {
    pub fn p_norm(self) -> Option<PNorm> {
        match self {
            Scorer::H2o => None,
            Scorer::ValueAwareL1 => Some(PNorm::L1),
            Scorer::ValueAwareL2 => Some(PNorm::L2),
        }
    }
}

/// Value magnitude of every token of a layer.
pub fn value_norms(trace: &AttentionTrace, layer: usize, p: PNorm, mode: ValueNormMode) -> Result<Vec<f64>> {
    check_layer(trace, layer)?;
    let h = trace.header();
    let heads = h.num_heads as f64;
    let norms = (0..h.seq_len)
        .map(|j| match mode {
            ValueNormMode::HeadMeanVector => {
                let mut mean = vec![0.0; h.value_dim];
                for head in 0..h.num_heads {
                    for (m, &v) in mean.iter_mut().zip(trace.value(layer, head, j)) {
                        *m += v as f64;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= heads);
                p.of(&mean)
            }
            ValueNormMode::MeanOfHeadNorms => {
                (0..h.num_heads)
                    .map(|head| {
                        let v: Vec<f64> = trace.value(layer, head, j).iter().map(|&x| x as f64).collect();
                        p.of(&v)
                    })
                    .sum::<f64>()
                    / heads
            }
        })
        .collect();
    Ok(norms)
}

/// Attention-only importance, accumulated row by row without holding the
/// full attention matrix.
pub fn h2o_importance(trace: &AttentionTrace, layer: usize) -> Result<ImportanceScores> {
    check_layer(trace, layer)?;
    let h = trace.header();
    let n = h.seq_len;
    let scale = 1.0 / (h.key_dim as f64).sqrt();
    let inv_heads = 1.0 / h.num_heads as f64;
    let mut scores = vec![0.0; n];
    let mut row = vec![0.0; n];
    for i in 1..n {
        for head in 0..h.num_heads {
            let q = trace.query(layer, head, i);
            let r = &mut row[..=i];
            for (j, a) in r.iter_mut().enumerate() {
                *a = dot(q, trace.key(layer, head, j)) * scale;
            }
            softmax_in_place(r);
            for (s, a) in scores[..i].iter_mut().zip(&r[..i]) {
                *s += a * inv_heads;
            }
        }
    }
    Ok(ImportanceScores { layer, scores })
}

/// Value-aware importance with the default head-mean value vector.
pub fn value_aware_importance(trace: &AttentionTrace, layer: usize, p: PNorm) -> Result<ImportanceScores> {
    value_aware_importance_with(trace, layer, p, ValueNormMode::default())
}

pub fn value_aware_importance_with(
    trace: &AttentionTrace,
    layer: usize,
    p: PNorm,
    mode: ValueNormMode,
) -> Result<ImportanceScores> {
    let mut s = h2o_importance(trace, layer)?;
    let norms = value_norms(trace, layer, p, mode)?;
    for (x, n) in s.scores.iter_mut().zip(norms) {
        *x *= n;
    }
    Ok(s)
}

pub fn importance(trace: &AttentionTrace, layer: usize, scorer: Scorer) -> Result<ImportanceScores> {
    match scorer.p_norm() {
        None => h2o_importance(trace, layer),
        Some(p) => value_aware_importance(trace, layer, p),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetainedSet {
    pub layer: usize,
    pub indices: Vec<usize>,
    pub budget: usize,
}

/// Indices of the `budget` largest scores (ties to the lower index), ascending.
pub fn top_indices(scores: &[f64], budget: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(budget);
    order.sort_unstable();
    order
}

pub fn select_top_tokens(scores: &ImportanceScores, budget: usize) -> Result<RetainedSet> {
    let n = scores.scores.len();
    if budget > n {
        return Err(Error::invalid(format!("budget {budget} exceeds {n} tokens")));
    }
    Ok(RetainedSet {
        layer: scores.layer,
        indices: top_indices(&scores.scores, budget),
        budget,
    })
}
