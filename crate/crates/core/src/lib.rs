//! Decoder-only transformer inference with pluggable KV-cache strategies.
//!
//! The centerpiece is KV-Direct: instead of keeping K/V for every past
//! token, keep a bounded number of recent entries and one residual vector
//! per evicted token, and rebuild the evicted K/V from those residuals when
//! attention needs them. Because the rebuild goes through exactly the same
//! kernels as the original cache fill, the result is bit-identical to an
//! unbounded cache.
//!
//! * [`numerics`]: deterministic f32 kernels.
//! * [`model`]: toy pre-norm transformer with GQA, RoPE and sliding layers.
//! * [`cache`]: full cache, five eviction baselines, KV-Direct, accounting.
//! * [`analysis`]: patching, spectral analysis, rank truncation, sweeps.
//! * [`bench`]: recompute-vs-read and decode-mode timing.

pub mod analysis;
pub mod bench;
pub mod cache;
pub mod error;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
