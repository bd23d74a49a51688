//! Closed-form memory and recompute-cost accounting.

use serde::Serialize;

use crate::cache::{CheckpointMode, StrategyKind};
use crate::error::{Error, Result};
use crate::model::ArchitectureShape;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryReport {
    pub strategy: String,
    pub tokens: usize,
    pub budget: usize,
    /// `2 · L · n_kv · d_head · b`
    pub kv_bytes_per_token: u64,
    /// `d_hidden · b`
    pub residual_bytes_per_token: u64,
    /// `2 · L · n_kv · d_head / d_hidden`
    pub compression_ratio: f64,
    pub kv_bytes: u64,
    pub checkpoint_bytes: u64,
    pub total_bytes: u64,
}

impl MemoryReport {
    /// Ratio rounded to one decimal, as usually quoted.
    pub fn ratio_display(&self) -> String {
        format!("{:.1}", self.compression_ratio)
    }
}

pub fn kv_bytes_per_token(s: &ArchitectureShape) -> u64 {
    2 * (s.n_layers * s.n_kv_heads * s.d_head * s.bytes_per_elem) as u64
}

pub fn residual_bytes_per_token(s: &ArchitectureShape) -> u64 {
    (s.d_hidden * s.bytes_per_elem) as u64
}

pub fn compression_ratio(s: &ArchitectureShape) -> f64 {
    (2 * s.n_layers * s.n_kv_heads * s.d_head) as f64 / s.d_hidden as f64
}

/// Bytes held after `tokens` tokens under `strategy`.
///
/// KV-Direct holds `B` KV entries per layer plus one residual per evicted
/// token: `M(T, B) = 2·B·L·n_kv·d_head·b + (T − B)·d_hidden·b`. Lossy
/// baselines hold `min(T, B)` KV entries and nothing else. The per-layer
/// checkpoint variant stores `L` residuals per evicted token.
pub fn memory_report(
    shape: &ArchitectureShape,
    tokens: usize,
    strategy: &StrategyKind,
) -> Result<MemoryReport> {
    let kv = kv_bytes_per_token(shape);
    let res = residual_bytes_per_token(shape);
    let budget = strategy.budget().unwrap_or(tokens);
    let (kv_bytes, checkpoint_bytes) = match strategy {
        StrategyKind::Full => (tokens as u64 * kv, 0),
        StrategyKind::KvDirect { budget, checkpoint } => {
            if tokens < *budget {
                return Err(Error::Param(format!(
                    "T = {tokens} is below the budget B = {budget}"
                )));
            }
            let evicted = (tokens - budget) as u64;
            let per_evicted = match checkpoint {
                CheckpointMode::Replay => res,
                CheckpointMode::PerLayer => res * shape.n_layers as u64,
            };
            (*budget as u64 * kv, evicted * per_evicted)
        }
        _ => (tokens.min(budget) as u64 * kv, 0),
    };
    Ok(MemoryReport {
        strategy: strategy.to_string(),
        tokens,
        budget,
        kv_bytes_per_token: kv,
        residual_bytes_per_token: res,
        compression_ratio: compression_ratio(shape),
        kv_bytes,
        checkpoint_bytes,
        total_bytes: kv_bytes + checkpoint_bytes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RecomputeCost {
    pub evicted: usize,
    /// `4 · N · n_kv · d_hidden · d_head`
    pub flops: u64,
    /// `2 · N · n_kv · d_head · b`
    pub read_bytes: u64,
}

/// FLOPs to rebuild K/V for `evicted` tokens at one layer, and the bytes
/// that reading the same entries from a cache would move.
pub fn cost_model(shape: &ArchitectureShape, evicted: usize) -> RecomputeCost {
    let n = evicted as u64;
    RecomputeCost {
        evicted,
        flops: 4 * n * (shape.n_kv_heads * shape.d_hidden * shape.d_head) as u64,
        read_bytes: 2 * n * (shape.n_kv_heads * shape.d_head * shape.bytes_per_elem) as u64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, REFERENCE_SHAPES};

    fn shape(name: &str) -> ArchitectureShape {
        *REFERENCE_SHAPES.iter().find(|s| s.name == name).unwrap()
    }

    fn kvd(budget: usize) -> StrategyKind {
        StrategyKind::KvDirect {
            budget,
            checkpoint: CheckpointMode::Replay,
        }
    }

    #[test]
    fn gemma_per_token_numbers() {
        let r = memory_report(&shape("Gemma3-4B"), 1, &kvd(0)).unwrap();
        assert_eq!(r.kv_bytes_per_token, 139_264);
        assert_eq!(r.residual_bytes_per_token, 5120);
        assert_eq!(r.ratio_display(), "27.2");
    }

    #[test]
    fn smol_and_qwen3_numbers() {
        let r = memory_report(&shape("SmolLM2-135M"), 1, &kvd(0)).unwrap();
        assert_eq!(
            (r.kv_bytes_per_token, r.residual_bytes_per_token),
            (23_040, 1152)
        );
        assert_eq!(r.ratio_display(), "20.0");
        let r = memory_report(&shape("Qwen3-0.6B"), 1, &kvd(0)).unwrap();
        assert_eq!(r.ratio_display(), "56.0");
    }

    #[test]
    fn budget_equal_to_tokens_has_no_checkpoints() {
        let s = shape("Qwen2.5-0.5B");
        let r = memory_report(&s, 100, &kvd(100)).unwrap();
        assert_eq!(r.checkpoint_bytes, 0);
        assert_eq!(r.total_bytes, 100 * r.kv_bytes_per_token);
        assert!(memory_report(&s, 10, &kvd(20)).is_err());
    }

    #[test]
    fn kvdirect_grows_by_one_residual_per_token() {
        let s = shape("Gemma3-4B");
        let mut prev = memory_report(&s, 64, &kvd(64)).unwrap().total_bytes;
        for t in 65..200 {
            let cur = memory_report(&s, t, &kvd(64)).unwrap().total_bytes;
            assert_eq!(cur - prev, 5120);
            prev = cur;
        }
    }

    #[test]
    fn cost_model_examples() {
        let toy = ArchitectureShape::from(&ModelConfig::toy());
        assert_eq!(
            cost_model(&toy, 0),
            RecomputeCost {
                evicted: 0,
                flops: 0,
                read_bytes: 0
            }
        );
        assert_eq!(cost_model(&toy, 10).flops, 81_920);
        assert_eq!(cost_model(&shape("Gemma3-4B"), 1).read_bytes, 4096);
    }
}
