//! Representation metrics over `T × d` hidden-state matrices.
//!
//! Spectral entropy and effective rank come from the singular values of the
//! token-centred matrix. Curvature is one minus the mean cosine similarity of
//! each token to its `k` nearest neighbours. DiME, LiDAR and InfoNCE compare
//! mean-pooled original and perturbed representations.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{mix64, CounterRng};
use crate::trace::{perturb_snapshot, RepresentationSnapshot, Stage};

/// Singular values below `SVD_CUTOFF · s_max` are treated as zero.
pub const SVD_CUTOFF: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DenominatorMode {
    /// Positive pair plus the `j ≠ i` negatives.
    #[default]
    Standard,
    /// `Σ_j exp(sim(o_i, o_j)/τ)` over all originals, positive pair excluded.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub knn_k: usize,
    pub temperature: f64,
    pub drop_prob: f64,
    pub bootstrap_resamples: usize,
    pub bootstrap_alpha: f64,
    pub denominator_mode: DenominatorMode,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            knn_k: 5,
            temperature: 0.1,
            drop_prob: 0.1,
            bootstrap_resamples: 1000,
            bootstrap_alpha: 0.05,
            denominator_mode: DenominatorMode::Standard,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.knn_k == 0 {
            return Err(Error::invalid("knn_k must be at least 1"));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(Error::invalid("temperature must be positive"));
        }
        if !(0.0..1.0).contains(&self.drop_prob) {
            return Err(Error::invalid("drop_prob must lie in [0, 1)"));
        }
        if self.bootstrap_resamples == 0 {
            return Err(Error::invalid("bootstrap_resamples must be at least 1"));
        }
        if !(self.bootstrap_alpha > 0.0 && self.bootstrap_alpha < 1.0) {
            return Err(Error::invalid("bootstrap_alpha must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn from_f32(rows: usize, cols: usize, data: &[f32]) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!("{} values for {rows}×{cols}", data.len())));
        }
        Ok(Self {
            rows,
            cols,
            data: data.iter().map(|&x| x as f64).collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unit vector, or the zero vector for zero input.
fn normalized(v: &[f64]) -> Vec<f64> {
    let n = norm2(v);
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        vec![0.0; v.len()]
    }
}

/// Singular values of the token-centred matrix, descending, with the
/// relative cutoff applied.
pub fn centered_singular_values(z: &Matrix) -> Vec<f64> {
    let mut mean = vec![0.0; z.cols];
    for i in 0..z.rows {
        for (m, x) in mean.iter_mut().zip(z.row(i)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= z.rows as f64);
    let centered = nalgebra::DMatrix::from_fn(z.rows, z.cols, |i, j| z.row(i)[j] - mean[j]);
    let mut s: Vec<f64> = centered.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    let max = s.first().copied().unwrap_or(0.0);
    for x in &mut s {
        if *x < SVD_CUTOFF * max {
            *x = 0.0;
        }
    }
    s
}

pub fn spectral_entropy(z: &Matrix) -> Result<f64> {
    if z.rows < 2 {
        return Err(Error::invalid("spectral entropy needs at least 2 rows"));
    }
    let s = centered_singular_values(z);
    let total: f64 = s.iter().sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let h = s
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|x| {
            let p = x / total;
            -p * p.ln()
        })
        .sum::<f64>();
    Ok(h.max(0.0))
}

pub fn effective_rank(z: &Matrix) -> Result<f64> {
    spectral_entropy(z).map(f64::exp)
}

pub fn curvature(z: &Matrix, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if z.rows <= k {
        return Err(Error::invalid(format!("curvature needs more than k = {k} rows, got {}", z.rows)));
    }
    let unit: Vec<Vec<f64>> = (0..z.rows).map(|i| normalized(z.row(i))).collect();
    let mut total = 0.0;
    let mut sims = Vec::with_capacity(z.rows);
    for i in 0..z.rows {
        sims.clear();
        sims.extend((0..z.rows).filter(|&j| j != i).map(|j| (dot(&unit[i], &unit[j]), j)));
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        total += sims[..k].iter().map(|s| s.0).sum::<f64>() / k as f64;
    }
    Ok(1.0 - total / z.rows as f64)
}

/// Cosine distance; 1 when either vector is zero.
pub fn dime(original: &[f64], augmented: &[f64]) -> Result<f64> {
    if original.len() != augmented.len() {
        return Err(Error::ShapeMismatch("vector lengths differ".into()));
    }
    let (a, b) = (dot(original, original), dot(augmented, augmented));
    if a == 0.0 || b == 0.0 {
        return Ok(1.0);
    }
    Ok((1.0 - dot(original, augmented) / (a * b).sqrt()).clamp(0.0, 2.0))
}

/// Euclidean distance.
pub fn lidar(original: &[f64], augmented: &[f64]) -> Result<f64> {
    if original.len() != augmented.len() {
        return Err(Error::ShapeMismatch("vector lengths differ".into()));
    }
    Ok(original
        .iter()
        .zip(augmented)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

pub fn mean_pool(z: &Matrix) -> Result<Vec<f64>> {
    if z.rows == 0 {
        return Err(Error::invalid("cannot mean-pool an empty matrix"));
    }
    let mut out = vec![0.0; z.cols];
    for i in 0..z.rows {
        for (o, x) in out.iter_mut().zip(z.row(i)) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|o| *o /= z.rows as f64);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfoNce {
    pub losses: Vec<f64>,
    pub mean: f64,
}

pub fn infonce(
    originals: &[Vec<f64>],
    augmenteds: &[Vec<f64>],
    temperature: f64,
    mode: DenominatorMode,
) -> Result<InfoNce> {
    let n = originals.len();
    if n < 2 || augmenteds.len() != n {
        return Err(Error::invalid("InfoNCE needs equal-length batches of at least 2"));
    }
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::invalid("temperature must be positive"));
    }
    let dim = originals[0].len();
    if originals.iter().chain(augmenteds).any(|v| v.len() != dim) {
        return Err(Error::ShapeMismatch("representation dimensions differ".into()));
    }
    let o: Vec<Vec<f64>> = originals.iter().map(|v| normalized(v)).collect();
    let a: Vec<Vec<f64>> = augmenteds.iter().map(|v| normalized(v)).collect();
    let losses: Vec<f64> = (0..n)
        .map(|i| {
            let positive = dot(&o[i], &a[i]) / temperature;
            let mut terms: Vec<f64> = match mode {
                DenominatorMode::Standard => std::iter::once(positive)
                    .chain((0..n).filter(|&j| j != i).map(|j| dot(&o[i], &o[j]) / temperature))
                    .collect(),
                DenominatorMode::Literal => (0..n).map(|j| dot(&o[i], &o[j]) / temperature).collect(),
            };
            let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            terms.iter_mut().for_each(|t| *t = (*t - max).exp());
            max + terms.iter().sum::<f64>().ln() - positive
        })
        .collect();
    let mean = losses.iter().sum::<f64>() / n as f64;
    Ok(InfoNce { losses, mean })
}

/// Linear-interpolation percentile of sorted data, `q ∈ [0, 1]`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap interval for the mean.
///
/// Resample `r` draws its `n` indices from `CounterRng::new(seed, r)`, so
/// the result does not depend on how resamples are scheduled.
pub fn bootstrap_ci(values: &[f64], resamples: usize, alpha: f64, seed: u64) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::invalid("bootstrap needs at least 2 values"));
    }
    if resamples == 0 || !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid("bootstrap needs resamples ≥ 1 and alpha in (0, 1)"));
    }
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples as u64)
        .into_par_iter()
        .map(|r| {
            let rng = CounterRng::new(seed, r);
            let mut sum = 0.0;
            for c in 0..n as u64 {
                sum += values[rng.below_at(c, n as u64) as usize];
            }
            sum / n as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    Ok((
        percentile_sorted(&means, alpha / 2.0),
        percentile_sorted(&means, 1.0 - alpha / 2.0),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    SpectralEntropy,
    EffectiveRank,
    Curvature,
    Dime,
    Lidar,
    Infonce,
}

impl MetricKind {
    pub const ALL: [MetricKind; 6] = [
        MetricKind::SpectralEntropy,
        MetricKind::EffectiveRank,
        MetricKind::Curvature,
        MetricKind::Dime,
        MetricKind::Lidar,
        MetricKind::Infonce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::SpectralEntropy => "spectral-entropy",
            MetricKind::EffectiveRank => "effective-rank",
            MetricKind::Curvature => "curvature",
            MetricKind::Dime => "dime",
            MetricKind::Lidar => "lidar",
            MetricKind::Infonce => "infonce",
        }
    }
}

impl std::str::FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MetricKind::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown metric {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub layer: usize,
    pub stage: Stage,
    pub metric: MetricKind,
    pub value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

const REPORT_COLUMNS: [&str; 6] = ["layer", "stage", "metric", "value", "ci_low", "ci_high"];

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let mut out = REPORT_COLUMNS.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.layer,
                r.stage,
                r.metric.name(),
                r.value,
                r.ci_low,
                r.ci_high
            ));
        }
        out
    }

    /// Parse the CSV written by [`MetricReport::to_csv`].
    pub fn from_csv_reader(reader: impl std::io::Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers().map_err(|e| Error::Csv(e.to_string()))?;
        if header.iter().ne(REPORT_COLUMNS) {
            return Err(Error::Csv(format!("expected columns {}", REPORT_COLUMNS.join(","))));
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Csv(e.to_string()))?;
            let bad = |col: usize| Error::Csv(format!("bad {} {:?} at row {}", REPORT_COLUMNS[col], &rec[col], i + 1));
            let num = |col: usize| rec[col].parse::<f64>().map_err(|_| bad(col));
            rows.push(MetricRow {
                layer: rec[0].parse().map_err(|_| bad(0))?,
                stage: rec[1].parse().map_err(|_| bad(1))?,
                metric: rec[2].parse().map_err(|_| bad(2))?,
                value: num(3)?,
                ci_low: num(4)?,
                ci_high: num(5)?,
            });
        }
        Ok(Self { rows })
    }

    /// Per-layer values of one metric at one stage, in layer order.
    pub fn layer_values(&self, metric: MetricKind, stage: Stage) -> Vec<f64> {
        let mut rows: Vec<&MetricRow> = self.rows.iter().filter(|r| r.metric == metric && r.stage == stage).collect();
        rows.sort_by_key(|r| r.layer);
        rows.iter().map(|r| r.value).collect()
    }
}

fn matrix_of(snap: &RepresentationSnapshot, layer: usize, slot: usize) -> Matrix {
    Matrix::from_f32(snap.seq_len(), snap.hidden_dim(), snap.matrix(layer, slot)).expect("snapshot shape")
}

/// Per-sample metric values at one (layer, stage slot).
fn cell_values(
    originals: &[RepresentationSnapshot],
    augmented: &[RepresentationSnapshot],
    layer: usize,
    slot: usize,
    config: &MetricConfig,
) -> Result<Vec<(MetricKind, Vec<f64>)>> {
    let mut entropy = Vec::new();
    let mut erank = Vec::new();
    let mut curv = Vec::new();
    let mut dimes = Vec::new();
    let mut lidars = Vec::new();
    let mut pooled_o = Vec::new();
    let mut pooled_a = Vec::new();
    for (o, a) in originals.iter().zip(augmented) {
        let zo = matrix_of(o, layer, slot);
        let h = spectral_entropy(&zo)?;
        entropy.push(h);
        erank.push(h.exp());
        curv.push(curvature(&zo, config.knn_k)?);
        let po = mean_pool(&zo)?;
        let pa = mean_pool(&matrix_of(a, layer, slot))?;
        dimes.push(dime(&po, &pa)?);
        lidars.push(lidar(&po, &pa)?);
        pooled_o.push(po);
        pooled_a.push(pa);
    }
    let nce = infonce(&pooled_o, &pooled_a, config.temperature, config.denominator_mode)?;
    Ok(vec![
        (MetricKind::SpectralEntropy, entropy),
        (MetricKind::EffectiveRank, erank),
        (MetricKind::Curvature, curv),
        (MetricKind::Dime, dimes),
        (MetricKind::Lidar, lidars),
        (MetricKind::Infonce, nce.losses),
    ])
}

/// All six metrics for every (layer, stage) over a batch of samples.
///
/// `augmented` pairs each original with its perturbed counterpart; when
/// `None`, each original `i` is perturbed with seed `mix64(seed ^ i)`.
/// Values are sample means; intervals are percentile-bootstrap over samples.
pub fn analyze_snapshots(
    originals: &[RepresentationSnapshot],
    augmented: Option<&[RepresentationSnapshot]>,
    config: &MetricConfig,
    seed: u64,
) -> Result<MetricReport> {
    config.validate()?;
    if originals.len() < 2 {
        return Err(Error::invalid("metric analysis needs at least 2 samples"));
    }
    let first = &originals[0];
    if originals.iter().any(|s| !s.pairs_with(first)) {
        return Err(Error::ShapeMismatch("original snapshots differ in layers, stages or width".into()));
    }
    let generated;
    let augmented = match augmented {
        Some(a) => {
            if a.len() != originals.len() || a.iter().any(|s| !s.pairs_with(first)) {
                return Err(Error::ShapeMismatch("augmented snapshots do not pair with originals".into()));
            }
            a
        }
        None => {
            generated = originals
                .iter()
                .enumerate()
                .map(|(i, s)| perturb_snapshot(s, config.drop_prob, mix64(seed ^ i as u64)))
                .collect::<Result<Vec<_>>>()?;
            &generated[..]
        }
    };
    let cells: Vec<(usize, usize)> = (0..first.num_layers())
        .flat_map(|l| (0..first.stages().len()).map(move |s| (l, s)))
        .collect();
    let per_cell: Vec<Vec<MetricRow>> = cells
        .par_iter()
        .map(|&(layer, slot)| {
            let stage = first.stages()[slot];
            cell_values(originals, augmented, layer, slot, config)?
                .into_iter()
                .map(|(metric, values)| {
                    let value = values.iter().sum::<f64>() / values.len() as f64;
                    let cell_seed = mix64(seed ^ mix64(((layer as u64) << 16) | ((slot as u64) << 8) | metric as u64));
                    let (ci_low, ci_high) =
                        bootstrap_ci(&values, config.bootstrap_resamples, config.bootstrap_alpha, cell_seed)?;
                    Ok(MetricRow {
                        layer,
                        stage,
                        metric,
                        value,
                        ci_low,
                        ci_high,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(MetricReport {
        rows: per_cell.into_iter().flatten().collect(),
    })
}
