//! Layer-dependent KV-cache budgeting toolkit.
//!
//! * [`trace`]: attention traces, representation snapshots, score tables and
//!   their file formats.
//! * [`importance`]: attention weights, H2O and value-aware token importance,
//!   top-k retention.
//! * [`allocation`]: uniform, middle-layer-protected and metric-guided
//!   per-layer pruning ratios under a global budget.
//! * [`metrics`]: spectral, geometric and invariance metrics of hidden
//!   representations, with bootstrap intervals.
//! * [`prefill`]: chunked-prefill eviction simulation and memory accounting.
//! * [`stats`]: permutation tests, correlations, z-scores and YapScore.

pub mod allocation;
pub mod error;
pub mod importance;
pub mod metrics;
pub mod prefill;
pub mod rng;
pub mod stats;
pub mod trace;

pub use error::{Error, Result};
