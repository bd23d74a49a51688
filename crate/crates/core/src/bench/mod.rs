//! Latency harness: rebuilding K/V from residuals versus copying cached
//! K/V, and end-to-end decode timings per cache mode.
//!
//! Everything here runs on the calling thread. Each sample times a batch
//! of `inner` back-to-back calls, with `inner` doubled until one sample
//! lasts at least [`BenchOptions::min_sample`], so timer granularity never
//! dominates. Reported times are per call.

use std::hint::black_box;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::cache::{
    cost_model, recompute_kv, CheckpointMode, KeyPosition, KvCache, LayerCheckpoints,
    ResidualCheckpoint, StrategyKind,
};
use crate::error::{Error, Result};
use crate::model::{ArchitectureShape, Generation, Model, SplitMix64};

pub const BENCH_GRID: [usize; 5] = [1, 10, 50, 100, 500];

/// Published behaviour on other hardware, carried in reports as context.
pub const REFERENCE_CONTEXT: &str =
    "reference curve on other hardware: ratio about 1.1x at N=1, falling to 0.17-0.3x at N=500; not asserted";

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchOptions {
    pub warmup: usize,
    pub reps: usize,
    #[serde(with = "duration_ns")]
    pub min_sample: Duration,
    pub layer: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            warmup: 5,
            reps: 30,
            min_sample: Duration::from_micros(200),
            layer: 0,
            seed: 0,
        }
    }
}

impl BenchOptions {
    pub fn validate(&self) -> Result<()> {
        if self.warmup < 5 {
            return Err(Error::Param(format!("warmup {} below 5", self.warmup)));
        }
        if self.reps < 10 {
            return Err(Error::Param(format!("reps {} below 10", self.reps)));
        }
        Ok(())
    }
}

mod duration_ns {
    use serde::Serializer;
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_nanos() as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Operation {
    RecomputeKv,
    ReadCachedKv,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatencySample {
    pub operation: Operation,
    pub n: usize,
    pub layer: usize,
    /// Median nanoseconds per call.
    pub median_ns: f64,
    pub min_ns: f64,
    pub max_ns: f64,
    pub repetitions: usize,
    /// Calls per timed sample.
    pub inner: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RatioPoint {
    pub n: usize,
    pub recompute: LatencySample,
    pub read: LatencySample,
    /// `median recompute / median read`.
    pub ratio: f64,
    pub flops: u64,
    pub read_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioCurve {
    pub layer: usize,
    pub points: Vec<RatioPoint>,
    pub reference_context: &'static str,
}

struct Timing {
    median: f64,
    min: f64,
    max: f64,
    inner: usize,
}

fn time_op(opts: &BenchOptions, mut op: impl FnMut()) -> Timing {
    for _ in 0..opts.warmup {
        op();
    }
    let mut inner = 1usize;
    loop {
        let t = Instant::now();
        for _ in 0..inner {
            op();
        }
        if t.elapsed() >= opts.min_sample || inner >= 1 << 24 {
            break;
        }
        inner *= 2;
    }
    let mut per_call: Vec<f64> = (0..opts.reps)
        .map(|_| {
            let t = Instant::now();
            for _ in 0..inner {
                op();
            }
            t.elapsed().as_nanos() as f64 / inner as f64
        })
        .collect();
    per_call.sort_by(f64::total_cmp);
    let mid = per_call.len() / 2;
    let median = if per_call.len() % 2 == 1 {
        per_call[mid]
    } else {
        (per_call[mid - 1] + per_call[mid]) / 2.0
    };
    Timing {
        median,
        min: per_call[0],
        max: per_call[per_call.len() - 1],
        inner,
    }
}

fn sample(operation: Operation, n: usize, layer: usize, reps: usize, t: Timing) -> LatencySample {
    LatencySample {
        operation,
        n,
        layer,
        median_ns: t.median,
        min_ns: t.min,
        max_ns: t.max,
        repetitions: reps,
        inner: t.inner,
    }
}

/// For each `N` in `grid`: time rebuilding `N` K/V entries at one layer
/// (RMSNorm, two projections, RoPE) against copying the equivalent
/// `2·N·n_kv·d_head` cached scalars to a fresh contiguous buffer.
pub fn bench_recompute_vs_read(
    model: &Model,
    grid: &[usize],
    opts: &BenchOptions,
) -> Result<RatioCurve> {
    opts.validate()?;
    if grid.is_empty() || grid.contains(&0) {
        return Err(Error::Param(
            "bench grid must be non-empty and positive".into(),
        ));
    }
    let cfg = model.config();
    if opts.layer >= cfg.n_layers {
        return Err(Error::Param(format!(
            "layer {} of {}",
            opts.layer, cfg.n_layers
        )));
    }
    let shape = ArchitectureShape::from(cfg);
    let mut rng = SplitMix64::new(opts.seed);
    let mut points = Vec::with_capacity(grid.len());
    for &n in grid {
        if n > cfg.max_seq_len {
            return Err(Error::PositionOverflow {
                position: n - 1,
                max: cfg.max_seq_len,
            });
        }
        let store = LayerCheckpoints {
            layer: opts.layer,
            checkpoints: (0..n)
                .map(|position| ResidualCheckpoint {
                    position,
                    residual: (0..cfg.d_hidden).map(|_| rng.next_symmetric(1.0)).collect(),
                })
                .collect(),
        };
        let recompute = time_op(opts, || {
            black_box(
                recompute_kv(model, black_box(&store), opts.layer, KeyPosition::Stored)
                    .expect("valid store"),
            );
        });

        let len = 2 * n * cfg.kv_dim();
        let cached: Vec<f32> = (0..len).map(|_| rng.next_symmetric(1.0)).collect();
        let mut dst = vec![0.0f32; len];
        let read = time_op(opts, || {
            dst.copy_from_slice(black_box(&cached));
            black_box(&mut dst);
        });

        let cost = cost_model(&shape, n);
        points.push(RatioPoint {
            n,
            ratio: recompute.median / read.median,
            recompute: sample(Operation::RecomputeKv, n, opts.layer, opts.reps, recompute),
            read: sample(Operation::ReadCachedKv, n, opts.layer, opts.reps, read),
            flops: cost.flops,
            read_bytes: cost.read_bytes,
        });
    }
    Ok(RatioCurve {
        layer: opts.layer,
        points,
        reference_context: REFERENCE_CONTEXT,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DecodeMode {
    FullCache,
    ScratchRecompute,
    KvDirect { budget: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecodeTiming {
    pub mode: DecodeMode,
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub repetitions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecodeBench {
    pub tokens: Vec<u32>,
    pub timings: Vec<DecodeTiming>,
}

impl DecodeBench {
    pub fn timing(&self, mode: DecodeMode) -> Option<&DecodeTiming> {
        self.timings.iter().find(|t| t.mode == mode)
    }

    /// Median scratch time over median full-cache time.
    pub fn scratch_slowdown(&self) -> Option<f64> {
        let full = self.timing(DecodeMode::FullCache)?;
        let scratch = self.timing(DecodeMode::ScratchRecompute)?;
        Some(scratch.median_ms / full.median_ms)
    }
}

fn run_mode(model: &Model, mode: DecodeMode, prompt: &[u32], n_new: usize) -> Result<Generation> {
    let kind = match mode {
        DecodeMode::ScratchRecompute => return model.greedy_decode_scratch(prompt, n_new),
        DecodeMode::FullCache => StrategyKind::Full,
        DecodeMode::KvDirect { budget } => StrategyKind::KvDirect {
            budget,
            checkpoint: CheckpointMode::Replay,
        },
    };
    let mut cache = KvCache::new(kind, model.config())?;
    model.greedy_decode(prompt, n_new, &mut cache)
}

/// Checks that every mode generates the same tokens, then times each one.
pub fn bench_decode(
    model: &Model,
    prompt: &[u32],
    n_new: usize,
    budget: usize,
    reps: usize,
) -> Result<DecodeBench> {
    if n_new < 10 {
        return Err(Error::Param(format!("n_new {n_new} below 10")));
    }
    if reps == 0 {
        return Err(Error::Param("reps must be at least 1".into()));
    }
    let modes = [
        DecodeMode::FullCache,
        DecodeMode::ScratchRecompute,
        DecodeMode::KvDirect { budget },
    ];
    let reference = run_mode(model, modes[0], prompt, n_new)?;
    for &mode in &modes[1..] {
        let g = run_mode(model, mode, prompt, n_new)?;
        if g.tokens != reference.tokens {
            return Err(Error::Mismatch(format!(
                "{mode:?} generated {:?}, full cache {:?}",
                g.tokens, reference.tokens
            )));
        }
    }
    let mut timings = Vec::with_capacity(modes.len());
    for mode in modes {
        let mut ms: Vec<f64> = Vec::with_capacity(reps);
        for _ in 0..reps {
            let t = Instant::now();
            black_box(run_mode(model, mode, black_box(prompt), n_new)?);
            ms.push(t.elapsed().as_secs_f64() * 1e3);
        }
        ms.sort_by(f64::total_cmp);
        let mid = ms.len() / 2;
        let median = if ms.len() % 2 == 1 {
            ms[mid]
        } else {
            (ms[mid - 1] + ms[mid]) / 2.0
        };
        timings.push(DecodeTiming {
            mode,
            median_ms: median,
            min_ms: ms[0],
            max_ms: ms[ms.len() - 1],
            repetitions: reps,
        });
    }
    Ok(DecodeBench {
        tokens: reference.tokens,
        timings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{byte_tokens, ModelConfig};

    fn quick() -> BenchOptions {
        BenchOptions {
            warmup: 5,
            reps: 10,
            min_sample: Duration::from_micros(20),
            layer: 1,
            seed: 3,
        }
    }

    #[test]
    fn single_checkpoint_timings_are_positive() {
        let m = Model::from_config(ModelConfig::toy()).unwrap();
        let curve = bench_recompute_vs_read(&m, &[1], &quick()).unwrap();
        let p = curve.points[0];
        assert!(p.recompute.median_ns > 0.0 && p.recompute.median_ns.is_finite());
        assert!(p.read.median_ns > 0.0 && p.read.median_ns.is_finite());
        assert!(
            p.recompute.min_ns <= p.recompute.median_ns
                && p.recompute.median_ns <= p.recompute.max_ns
        );
        assert!(p.ratio > 0.0);
    }

    #[test]
    fn cost_columns_follow_the_formulas() {
        let m = Model::from_config(ModelConfig::toy()).unwrap();
        let curve = bench_recompute_vs_read(&m, &[1, 10], &quick()).unwrap();
        for p in &curve.points {
            let n = p.n as u64;
            assert_eq!(p.flops, 4 * n * 2 * 64 * 16);
            assert_eq!(p.read_bytes, 2 * n * 2 * 16 * 4);
        }
    }

    #[test]
    fn options_are_validated() {
        let m = Model::from_config(ModelConfig::toy()).unwrap();
        let bad = BenchOptions { reps: 3, ..quick() };
        assert!(bench_recompute_vs_read(&m, &[1], &bad).is_err());
        assert!(bench_recompute_vs_read(&m, &[], &quick()).is_err());
    }

    #[test]
    fn decode_modes_agree_before_timing() {
        let m = Model::from_config(ModelConfig::toy()).unwrap();
        let b = bench_decode(&m, &byte_tokens(b"decode timing"), 10, 0, 1).unwrap();
        assert_eq!(b.tokens.len(), 10);
        assert_eq!(b.timings.len(), 3);
        assert!(bench_decode(&m, &byte_tokens(b"x"), 5, 0, 1).is_err());
    }
}
