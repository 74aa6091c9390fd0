//! Attention traces, representation snapshots and score tables.
//!
//! Binary layouts (all integers u32 little-endian, all reals f32
//! little-endian IEEE-754):
//!
//! * Trace `DKVT`: magic, version = 1, L, H, N, d_k, d_v, then for each
//!   layer and head the Q rows, the K rows and the V rows.
//! * Snapshot `DKVR`: magic, version = 1, L, stage count, one u32 stage id per
//!   stage, T, d, one pair-tag byte, then the `T × d` matrices in
//!   (layer, stage) order.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::CounterRng;

pub const TRACE_MAGIC: [u8; 4] = *b"DKVT";
pub const SNAPSHOT_MAGIC: [u8; 4] = *b"DKVR";
pub const FORMAT_VERSION: u32 = 1;

/// Byte length of the fixed part of a trace file.
pub const TRACE_HEADER_BYTES: usize = 8 + 4 * 5;

const TRACE_STREAM: u64 = 0x7472_6163;
const SNAPSHOT_STREAM: u64 = 0x736e_6170;
const PERTURB_STREAM: u64 = 0x6472_6f70;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub num_layers: usize,
    pub num_heads: usize,
    pub seq_len: usize,
    pub key_dim: usize,
    pub value_dim: usize,
}

impl TraceHeader {
    pub fn new(
        num_layers: usize,
        num_heads: usize,
        seq_len: usize,
        key_dim: usize,
        value_dim: usize,
    ) -> Result<Self> {
        let h = Self {
            num_layers,
            num_heads,
            seq_len,
            key_dim,
            value_dim,
        };
        h.validate()?;
        Ok(h)
    }

    fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("seq_len", self.seq_len),
            ("key_dim", self.key_dim),
            ("value_dim", self.value_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
            if u32::try_from(v).is_err() {
                return Err(Error::invalid(format!("{name} does not fit in u32")));
            }
        }
        Ok(())
    }

    /// Number of f32 values in the payload, `L·H·N·(2·d_k + d_v)`.
    pub fn payload_len(&self) -> usize {
        self.num_layers * self.num_heads * self.seq_len * (2 * self.key_dim + self.value_dim)
    }

    /// Total file size in bytes.
    pub fn file_len(&self) -> usize {
        TRACE_HEADER_BYTES + 4 * self.payload_len()
    }
}

/// Per-layer, per-head Q/K/V tensors for a prefix of N tokens.
///
/// Each tensor is stored flat in `[layer][head][token][dim]` order.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    header: TraceHeader,
    queries: Vec<f32>,
    keys: Vec<f32>,
    values: Vec<f32>,
}

impl AttentionTrace {
    pub fn from_parts(
        header: TraceHeader,
        queries: Vec<f32>,
        keys: Vec<f32>,
        values: Vec<f32>,
    ) -> Result<Self> {
        header.validate()?;
        let qk = header.num_layers * header.num_heads * header.seq_len * header.key_dim;
        let v = header.num_layers * header.num_heads * header.seq_len * header.value_dim;
        if queries.len() != qk || keys.len() != qk || values.len() != v {
            return Err(Error::ShapeMismatch(format!(
                "expected Q/K of {qk} and V of {v} values, got {}/{}/{}",
                queries.len(),
                keys.len(),
                values.len()
            )));
        }
        for (i, x) in queries.iter().chain(&keys).chain(&values).enumerate() {
            if !x.is_finite() {
                return Err(Error::NonFinite { index: i });
            }
        }
        Ok(Self {
            header,
            queries,
            keys,
            values,
        })
    }

    pub fn header(&self) -> &TraceHeader {
        &self.header
    }

    #[inline]
    fn row_offset(&self, layer: usize, head: usize, token: usize, dim: usize) -> usize {
        ((layer * self.header.num_heads + head) * self.header.seq_len + token) * dim
    }

    #[inline]
    pub fn query(&self, layer: usize, head: usize, token: usize) -> &[f32] {
        let d = self.header.key_dim;
        let o = self.row_offset(layer, head, token, d);
        &self.queries[o..o + d]
    }

    #[inline]
    pub fn key(&self, layer: usize, head: usize, token: usize) -> &[f32] {
        let d = self.header.key_dim;
        let o = self.row_offset(layer, head, token, d);
        &self.keys[o..o + d]
    }

    #[inline]
    pub fn value(&self, layer: usize, head: usize, token: usize) -> &[f32] {
        let d = self.header.value_dim;
        let o = self.row_offset(layer, head, token, d);
        &self.values[o..o + d]
    }

    /// Mutable access to the value rows of one layer (all heads, all tokens).
    pub fn layer_values_mut(&mut self, layer: usize) -> &mut [f32] {
        let per_layer = self.header.num_heads * self.header.seq_len * self.header.value_dim;
        &mut self.values[layer * per_layer..(layer + 1) * per_layer]
    }

    /// The first `seq_len` tokens of every layer and head.
    pub fn prefix(&self, seq_len: usize) -> Result<Self> {
        let hd = self.header;
        if seq_len == 0 || seq_len > hd.seq_len {
            return Err(Error::invalid(format!("prefix length {seq_len} outside 1..={}", hd.seq_len)));
        }
        let cut = |src: &[f32], dim: usize| {
            src.chunks(hd.seq_len * dim)
                .flat_map(|block| block[..seq_len * dim].iter().copied())
                .collect()
        };
        Ok(Self {
            header: TraceHeader { seq_len, ..hd },
            queries: cut(&self.queries, hd.key_dim),
            keys: cut(&self.keys, hd.key_dim),
            values: cut(&self.values, hd.value_dim),
        })
    }

    /// Copy of this trace with the head order of every layer permuted:
    /// new head `h` is old head `order[h]`.
    pub fn with_head_order(&self, order: &[usize]) -> Result<Self> {
        let h = self.header.num_heads;
        let mut seen = vec![false; h];
        if order.len() != h || order.iter().any(|&o| o >= h || std::mem::replace(&mut seen[o], true)) {
            return Err(Error::invalid("head order must be a permutation"));
        }
        let hd = self.header;
        let permute = |src: &[f32], dim: usize| {
            let block = hd.seq_len * dim;
            let mut out = Vec::with_capacity(src.len());
            for layer in 0..hd.num_layers {
                for &old in order {
                    let start = (layer * h + old) * block;
                    out.extend_from_slice(&src[start..start + block]);
                }
            }
            out
        };
        Ok(Self {
            header: hd,
            queries: permute(&self.queries, hd.key_dim),
            keys: permute(&self.keys, hd.key_dim),
            values: permute(&self.values, hd.value_dim),
        })
    }

    /// Serialize to the `DKVT` byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(h.file_len());
        out.extend_from_slice(&TRACE_MAGIC);
        for v in [
            FORMAT_VERSION as usize,
            h.num_layers,
            h.num_heads,
            h.seq_len,
            h.key_dim,
            h.value_dim,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        let qk = h.seq_len * h.key_dim;
        let vv = h.seq_len * h.value_dim;
        for block in 0..h.num_layers * h.num_heads {
            for src in [
                &self.queries[block * qk..(block + 1) * qk],
                &self.keys[block * qk..(block + 1) * qk],
                &self.values[block * vv..(block + 1) * vv],
            ] {
                for x in src {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    /// Parse the `DKVT` byte layout.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(TRACE_MAGIC)?;
        r.version()?;
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let header = TraceHeader {
            num_layers: dims[0],
            num_heads: dims[1],
            seq_len: dims[2],
            key_dim: dims[3],
            value_dim: dims[4],
        };
        if dims.contains(&0) {
            return Err(Error::Malformed("zero dimension in trace header".into()));
        }
        let floats = dims[0] as u64 * dims[1] as u64 * dims[2] as u64 * (2 * dims[3] as u64 + dims[4] as u64);
        r.expect_exact(floats)?;

        let qk = header.seq_len * header.key_dim;
        let vv = header.seq_len * header.value_dim;
        let blocks = header.num_layers * header.num_heads;
        let mut queries = Vec::with_capacity(blocks * qk);
        let mut keys = Vec::with_capacity(blocks * qk);
        let mut values = Vec::with_capacity(blocks * vv);
        for _ in 0..blocks {
            r.floats_into(qk, &mut queries)?;
            r.floats_into(qk, &mut keys)?;
            r.floats_into(vv, &mut values)?;
        }
        Ok(Self {
            header,
            queries,
            keys,
            values,
        })
    }
}

pub fn save_trace(trace: &AttentionTrace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, trace.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<AttentionTrace> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    AttentionTrace::from_bytes(&bytes)
}

/// Seeded trace with standard-normal entries.
///
/// Payload element `i` (in file order) is `CounterRng::new(seed, TRACE).normal_at(i)`
/// rounded to f32.
pub fn generate_synthetic_trace(
    num_layers: usize,
    num_heads: usize,
    seq_len: usize,
    key_dim: usize,
    value_dim: usize,
    seed: u64,
) -> Result<AttentionTrace> {
    let header = TraceHeader::new(num_layers, num_heads, seq_len, key_dim, value_dim)?;
    let rng = CounterRng::new(seed, TRACE_STREAM);
    let qk = seq_len * key_dim;
    let vv = seq_len * value_dim;
    let blocks = num_layers * num_heads;
    let mut queries = Vec::with_capacity(blocks * qk);
    let mut keys = Vec::with_capacity(blocks * qk);
    let mut values = Vec::with_capacity(blocks * vv);
    let mut counter = 0u64;
    let mut fill = |dst: &mut Vec<f32>, n: usize| {
        for _ in 0..n {
            dst.push(rng.normal_at(counter) as f32);
            counter += 1;
        }
    };
    for _ in 0..blocks {
        fill(&mut queries, qk);
        fill(&mut keys, qk);
        fill(&mut values, vv);
    }
    Ok(AttentionTrace {
        header,
        queries,
        keys,
        values,
    })
}

/// Transformer-block hook points a snapshot can be taken at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    PreAttention,
    PostAttention,
    PostAttentionResidual,
    PostMlp,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Stage::PreAttention,
        Stage::PostAttention,
        Stage::PostAttentionResidual,
        Stage::PostMlp,
    ];

    pub fn id(self) -> u32 {
        match self {
            Stage::PreAttention => 0,
            Stage::PostAttention => 1,
            Stage::PostAttentionResidual => 2,
            Stage::PostMlp => 3,
        }
    }

    pub fn from_id(id: u32) -> Option<Self> {
        Stage::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::PreAttention => "pre-attention",
            Stage::PostAttention => "post-attention",
            Stage::PostAttentionResidual => "post-attention-residual",
            Stage::PostMlp => "post-mlp",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairTag {
    Original,
    Augmented,
}

/// Per-layer, per-stage `T × d` hidden-state matrices for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationSnapshot {
    num_layers: usize,
    stages: Vec<Stage>,
    seq_len: usize,
    hidden_dim: usize,
    data: Vec<f32>,
    pair_tag: PairTag,
}

impl RepresentationSnapshot {
    pub fn from_parts(
        num_layers: usize,
        stages: Vec<Stage>,
        seq_len: usize,
        hidden_dim: usize,
        data: Vec<f32>,
        pair_tag: PairTag,
    ) -> Result<Self> {
        if num_layers == 0 || stages.is_empty() || seq_len == 0 || hidden_dim == 0 {
            return Err(Error::invalid("snapshot dimensions must be at least 1"));
        }
        let mut sorted = stages.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != stages.len() {
            return Err(Error::invalid("duplicate stage in snapshot"));
        }
        let expected = num_layers * stages.len() * seq_len * hidden_dim;
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "expected {expected} snapshot values, got {}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            num_layers,
            stages,
            seq_len,
            hidden_dim,
            data,
            pair_tag,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn pair_tag(&self) -> PairTag {
        self.pair_tag
    }

    pub fn stage_index(&self, stage: Stage) -> Option<usize> {
        self.stages.iter().position(|&s| s == stage)
    }

    /// Row-major `T × d` matrix for `(layer, stage slot)`.
    pub fn matrix(&self, layer: usize, stage_slot: usize) -> &[f32] {
        let block = self.seq_len * self.hidden_dim;
        let o = (layer * self.stages.len() + stage_slot) * block;
        &self.data[o..o + block]
    }

    /// True when `other` can be paired with this snapshot (same L, stages, d).
    pub fn pairs_with(&self, other: &Self) -> bool {
        self.num_layers == other.num_layers
            && self.stages == other.stages
            && self.hidden_dim == other.hidden_dim
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 4 * self.stages.len() + 4 * self.data.len());
        out.extend_from_slice(&SNAPSHOT_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.num_layers as u32).to_le_bytes());
        out.extend_from_slice(&(self.stages.len() as u32).to_le_bytes());
        for s in &self.stages {
            out.extend_from_slice(&s.id().to_le_bytes());
        }
        out.extend_from_slice(&(self.seq_len as u32).to_le_bytes());
        out.extend_from_slice(&(self.hidden_dim as u32).to_le_bytes());
        out.push(match self.pair_tag {
            PairTag::Original => 0,
            PairTag::Augmented => 1,
        });
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(SNAPSHOT_MAGIC)?;
        r.version()?;
        let num_layers = r.u32()? as usize;
        let stage_count = r.u32()? as usize;
        if stage_count > Stage::ALL.len() {
            return Err(Error::Malformed(format!("stage count {stage_count} exceeds 4")));
        }
        let mut stages = Vec::with_capacity(stage_count);
        for _ in 0..stage_count {
            let id = r.u32()?;
            stages.push(Stage::from_id(id).ok_or_else(|| Error::Malformed(format!("unknown stage id {id}")))?);
        }
        let seq_len = r.u32()? as usize;
        let hidden_dim = r.u32()? as usize;
        let pair_tag = match r.byte()? {
            0 => PairTag::Original,
            1 => PairTag::Augmented,
            b => return Err(Error::Malformed(format!("unknown pair tag {b}"))),
        };
        if num_layers == 0 || stage_count == 0 || seq_len == 0 || hidden_dim == 0 {
            return Err(Error::Malformed("zero dimension in snapshot header".into()));
        }
        let floats = num_layers as u64 * stage_count as u64 * seq_len as u64 * hidden_dim as u64;
        r.expect_exact(floats)?;
        let mut data = Vec::with_capacity(floats as usize);
        r.floats_into(floats as usize, &mut data)?;
        Self::from_parts(num_layers, stages, seq_len, hidden_dim, data, pair_tag).map_err(|e| match e {
            Error::InvalidArgument(m) => Error::Malformed(m),
            other => other,
        })
    }

    /// Keep only the listed token rows (strictly increasing) in every matrix.
    fn select_rows(&self, rows: &[usize], pair_tag: PairTag) -> Self {
        let d = self.hidden_dim;
        let mut data = Vec::with_capacity(self.num_layers * self.stages.len() * rows.len() * d);
        for layer in 0..self.num_layers {
            for slot in 0..self.stages.len() {
                let m = self.matrix(layer, slot);
                for &t in rows {
                    data.extend_from_slice(&m[t * d..(t + 1) * d]);
                }
            }
        }
        Self {
            num_layers: self.num_layers,
            stages: self.stages.clone(),
            seq_len: rows.len(),
            hidden_dim: d,
            data,
            pair_tag,
        }
    }
}

pub fn save_snapshot(snap: &RepresentationSnapshot, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, snap.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_snapshot(path: impl AsRef<Path>) -> Result<RepresentationSnapshot> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    RepresentationSnapshot::from_bytes(&bytes)
}

/// Seeded original snapshot with standard-normal entries.
pub fn generate_synthetic_snapshot(
    num_layers: usize,
    stages: Vec<Stage>,
    seq_len: usize,
    hidden_dim: usize,
    seed: u64,
) -> Result<RepresentationSnapshot> {
    let n = num_layers * stages.len() * seq_len * hidden_dim;
    let rng = CounterRng::new(seed, SNAPSHOT_STREAM);
    let data = (0..n as u64).map(|i| rng.normal_at(i) as f32).collect();
    RepresentationSnapshot::from_parts(num_layers, stages, seq_len, hidden_dim, data, PairTag::Original)
}

/// Indices of the token rows that survive dropout with probability
/// `drop_prob`. Row `t` is dropped iff `uniform_at(t) < drop_prob` on the
/// perturbation stream of `seed`; if every row is dropped, row 0 is kept.
pub fn surviving_rows(seq_len: usize, drop_prob: f64, seed: u64) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&drop_prob) {
        return Err(Error::invalid(format!("drop_prob {drop_prob} outside [0, 1)")));
    }
    let rng = CounterRng::new(seed, PERTURB_STREAM);
    let mut rows: Vec<usize> = (0..seq_len)
        .filter(|&t| rng.uniform_at(t as u64) >= drop_prob)
        .collect();
    if rows.is_empty() && seq_len > 0 {
        rows.push(0);
    }
    Ok(rows)
}

/// Token-row dropout: the augmented counterpart of an original snapshot.
pub fn perturb_snapshot(
    snap: &RepresentationSnapshot,
    drop_prob: f64,
    seed: u64,
) -> Result<RepresentationSnapshot> {
    if snap.pair_tag != PairTag::Original {
        return Err(Error::invalid("only original snapshots can be perturbed"));
    }
    let rows = surviving_rows(snap.seq_len, drop_prob, seed)?;
    Ok(snap.select_rows(&rows, PairTag::Augmented))
}

/// Samples × layers matrix of performance values.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    values: Vec<Vec<f64>>,
    layer_labels: Vec<String>,
}

impl ScoreTable {
    pub fn new(values: Vec<Vec<f64>>, layer_labels: Option<Vec<String>>) -> Result<Self> {
        let num_layers = values.first().map(Vec::len).unwrap_or(0);
        if values.is_empty() || num_layers == 0 {
            return Err(Error::invalid("score table needs at least one sample and one layer"));
        }
        for (i, row) in values.iter().enumerate() {
            if row.len() != num_layers {
                return Err(Error::ShapeMismatch(format!(
                    "sample {i} has {} cells, expected {num_layers}",
                    row.len()
                )));
            }
        }
        if let Some(index) = values.iter().flatten().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        let layer_labels = match layer_labels {
            Some(l) if l.len() != num_layers => {
                return Err(Error::ShapeMismatch("label count differs from layer count".into()))
            }
            Some(l) => l,
            None => (0..num_layers).map(|l| format!("layer_{l}")).collect(),
        };
        Ok(Self {
            values,
            layer_labels,
        })
    }

    pub fn num_samples(&self) -> usize {
        self.values.len()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_labels.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn layer_labels(&self) -> &[String] {
        &self.layer_labels
    }

    /// Mean over samples for each layer.
    pub fn layer_means(&self) -> Vec<f64> {
        let n = self.num_samples() as f64;
        let mut means = vec![0.0; self.num_layers()];
        for row in &self.values {
            for (m, v) in means.iter_mut().zip(row) {
                *m += v;
            }
        }
        means.iter_mut().for_each(|m| *m /= n);
        means
    }

    pub fn from_csv_reader(reader: impl std::io::Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let labels: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::Csv(e.to_string()))?
            .iter()
            .map(str::to_owned)
            .collect();
        let mut values = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Csv(e.to_string()))?;
            let row = rec
                .iter()
                .enumerate()
                .map(|(j, cell)| {
                    if cell.is_empty() {
                        return Err(Error::Csv(format!("missing cell at row {}, column {}", i + 1, j + 1)));
                    }
                    cell.parse::<f64>()
                        .map_err(|_| Error::Csv(format!("bad number {cell:?} at row {}, column {}", i + 1, j + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            values.push(row);
        }
        Self::new(values, Some(labels))
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(file)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = self.layer_labels.join(",");
        out.push('\n');
        for row in &self.values {
            let cells: Vec<String> = row.iter().map(f64::to_string).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                expected: (self.pos + n) as u64,
                actual: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.take(4)?.try_into().expect("4 bytes");
        if found != expected {
            return Err(Error::BadMagic { expected, found });
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        match self.u32()? {
            FORMAT_VERSION => Ok(()),
            v => Err(Error::UnsupportedVersion(v)),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn byte(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    /// Check that exactly `floats` f32 values remain.
    fn expect_exact(&self, floats: u64) -> Result<()> {
        let remaining = (self.bytes.len() - self.pos) as u64;
        let needed = floats.checked_mul(4).ok_or_else(|| Error::Malformed("header dimensions overflow".into()))?;
        if remaining < needed {
            return Err(Error::Truncated {
                expected: self.pos as u64 + needed,
                actual: self.bytes.len() as u64,
            });
        }
        if remaining > needed {
            return Err(Error::Malformed(format!("{} trailing bytes", remaining - needed)));
        }
        Ok(())
    }

    fn floats_into(&mut self, n: usize, dst: &mut Vec<f32>) -> Result<()> {
        let base = dst.len();
        for (k, chunk) in self.take(4 * n)?.chunks_exact(4).enumerate() {
            let x = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            if !x.is_finite() {
                return Err(Error::NonFinite { index: base + k });
            }
            dst.push(x);
        }
        Ok(())
    }
}
