//! Brute-force reference implementations used as test oracles.
//!
//! These deliberately take different routes from the library: no row-max
//! softmax stabilization, explicit dense attention matrices, selection by
//! repeated argmax, and a boolean-mask eviction simulator.

#![allow(dead_code)]

use kvbudget::rng::CounterRng;
use kvbudget::trace::AttentionTrace;

pub fn naive_dot(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] as f64 * b[k] as f64;
    }
    s
}

/// Dense head-mean attention `[N][N]` with zeros above the diagonal.
pub fn naive_mean_attention(t: &AttentionTrace, layer: usize) -> Vec<Vec<f64>> {
    let h = t.header();
    let n = h.seq_len;
    let mut mean = vec![vec![0.0; n]; n];
    for head in 0..h.num_heads {
        for i in 0..n {
            let mut e = vec![0.0; i + 1];
            let mut z = 0.0;
            for j in 0..=i {
                e[j] = (naive_dot(t.query(layer, head, i), t.key(layer, head, j)) / (h.key_dim as f64).sqrt()).exp();
                z += e[j];
            }
            for j in 0..=i {
                mean[i][j] += e[j] / z / h.num_heads as f64;
            }
        }
    }
    mean
}

pub fn naive_h2o(t: &AttentionTrace, layer: usize) -> Vec<f64> {
    let a = naive_mean_attention(t, layer);
    let n = a.len();
    (0..n).map(|j| (j + 1..n).map(|i| a[i][j]).sum()).collect()
}

/// Norm of the head-mean value vector: p = 1 or 2.
pub fn naive_value_norm(t: &AttentionTrace, layer: usize, j: usize, p: u32) -> f64 {
    let h = t.header();
    let mut v = vec![0.0; h.value_dim];
    for head in 0..h.num_heads {
        for (k, x) in t.value(layer, head, j).iter().enumerate() {
            v[k] += *x as f64 / h.num_heads as f64;
        }
    }
    match p {
        1 => v.iter().map(|x| x.abs()).sum(),
        _ => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
    }
}

pub fn naive_value_aware(t: &AttentionTrace, layer: usize, p: u32) -> Vec<f64> {
    naive_h2o(t, layer)
        .into_iter()
        .enumerate()
        .map(|(j, s)| s * naive_value_norm(t, layer, j, p))
        .collect()
}

/// Top-k by repeated argmax (first maximum wins), returned ascending.
pub fn naive_top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; scores.len()];
    let mut out = Vec::new();
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for j in 0..scores.len() {
            if !taken[j] && best.map_or(true, |b| scores[j] > scores[b]) {
                best = Some(j);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push(b);
    }
    out.sort();
    out
}

/// Reference chunked-prefill simulator over one layer (visible-set mode).
/// `p_norm = 0` selects attention-only scoring. Returns the retained set
/// after every chunk.
pub fn reference_prefill(t: &AttentionTrace, layer: usize, budget: usize, chunk: usize, p_norm: u32) -> Vec<Vec<usize>> {
    let h = t.header();
    let n = h.seq_len;
    let mut alive = vec![false; n];
    let mut acc = vec![0.0; n];
    let mut history = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        for i in start..end {
            for head in 0..h.num_heads {
                let visible: Vec<usize> = (0..=i).filter(|&j| alive[j] || j >= start).collect();
                let logits: Vec<f64> = visible
                    .iter()
                    .map(|&j| naive_dot(t.query(layer, head, i), t.key(layer, head, j)) / (h.key_dim as f64).sqrt())
                    .collect();
                let z: f64 = logits.iter().map(|a| a.exp()).sum();
                for (a, &j) in logits.iter().zip(&visible) {
                    if j != i {
                        acc[j] += a.exp() / z / h.num_heads as f64;
                    }
                }
            }
        }
        for j in start..end {
            alive[j] = true;
        }
        let candidates: Vec<usize> = (0..end).filter(|&j| alive[j]).collect();
        let keys: Vec<f64> = candidates
            .iter()
            .map(|&j| if p_norm == 0 { acc[j] } else { acc[j] * naive_value_norm(t, layer, j, p_norm) })
            .collect();
        let keep = naive_top_k(&keys, budget.min(candidates.len()));
        for &j in &candidates {
            alive[j] = false;
        }
        for k in keep {
            alive[candidates[k]] = true;
        }
        history.push((0..n).filter(|&j| alive[j]).collect());
        start = end;
    }
    history
}

/// Sequential reimplementation of the seeded percentile bootstrap.
pub fn reference_bootstrap(values: &[f64], resamples: usize, alpha: f64, seed: u64) -> (f64, f64) {
    let n = values.len();
    let mut means = Vec::new();
    for r in 0..resamples {
        let rng = CounterRng::new(seed, r as u64);
        let mut total = 0.0;
        for c in 0..n {
            total += values[rng.below_at(c as u64, n as u64) as usize];
        }
        means.push(total / n as f64);
    }
    means.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| {
        let pos = p * (means.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        means[lo] * (1.0 - (pos - lo as f64)) + means[hi] * (pos - lo as f64)
    };
    (q(alpha / 2.0), q(1.0 - alpha / 2.0))
}

/// Rows `[c·e_0, −c·e_0, c·e_1, −c·e_1, …]` for `k` axes in dimension `dim`:
/// the mean row is zero and the centred matrix has `k` equal singular values.
pub fn equal_singular_rows(k: usize, dim: usize, c: f64) -> Vec<Vec<f64>> {
    let mut rows = Vec::new();
    for axis in 0..k {
        for sign in [1.0, -1.0] {
            let mut r = vec![0.0; dim];
            r[axis] = sign * c;
            rows.push(r);
        }
    }
    rows
}

/// Rotate the rows with a fixed Householder reflection so the equal
/// singular values are not axis-aligned.
pub fn householder_rotate(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = rows[0].len();
    let mut u: Vec<f64> = (0..dim).map(|i| 1.0 + i as f64 * 0.37).collect();
    let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    u.iter_mut().for_each(|x| *x /= norm);
    rows.iter()
        .map(|r| {
            let d: f64 = r.iter().zip(&u).map(|(a, b)| a * b).sum();
            r.iter().zip(&u).map(|(a, b)| a - 2.0 * d * b).collect()
        })
        .collect()
}
