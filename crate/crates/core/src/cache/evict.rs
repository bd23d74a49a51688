//! Retention rules for the eviction baselines.
//!
//! The baselines are reconstructions of the published policies:
//!
//! * **WindowOnly**: keep the most recent `B` positions.
//! * **H2O**: keep the most recent `⌊B/2⌋` positions, and fill the rest of
//!   the budget with the older positions that received the most attention,
//!   summed over every query so far.
//! * **StreamingLLM**: keep the first `n_sinks` positions plus the most
//!   recent `B - n_sinks`.
//! * **SnapKV**: keep the top-`B` positions by mean attention over the last
//!   `obs_window` queries.
//! * **TOVA**: keep the top-`B` positions by the latest query's attention.
//!
//! Equal scores evict the oldest position first.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvictionPolicy {
    WindowOnly,
    H2O,
    StreamingLlm { sinks: usize },
    SnapKv,
    Tova,
}

/// Positions to retain, ascending.
///
/// `scores[i]` belongs to `positions[i]` and is already aggregated the way
/// the policy needs (cumulative, pooled or latest); it is ignored by the
/// recency-based policies. `positions` must be ascending.
pub fn baseline_evict(
    policy: EvictionPolicy,
    positions: &[usize],
    scores: &[f64],
    budget: usize,
) -> Result<Vec<usize>> {
    if budget == 0 {
        return Err(Error::Param("eviction budget must be at least 1".into()));
    }
    if positions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Param("positions must be strictly ascending".into()));
    }
    if positions.len() <= budget {
        return Ok(positions.to_vec());
    }
    let n = positions.len();
    let kept = match policy {
        EvictionPolicy::WindowOnly => positions[n - budget..].to_vec(),
        EvictionPolicy::StreamingLlm { sinks } => {
            let sinks = sinks.min(budget);
            let mut kept = positions[..sinks].to_vec();
            kept.extend_from_slice(&positions[n - (budget - sinks)..]);
            kept
        }
        EvictionPolicy::H2O | EvictionPolicy::SnapKv | EvictionPolicy::Tova => {
            if scores.len() != n {
                return Err(Error::Shape(format!(
                    "{} scores for {n} positions",
                    scores.len()
                )));
            }
            let recent = if policy == EvictionPolicy::H2O {
                budget / 2
            } else {
                0
            };
            let older = n - recent;
            let mut order: Vec<usize> = (0..older).collect();
            // Highest score first; among equals the newest first, so the
            // oldest falls off the end.
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(b.cmp(&a)));
            let mut kept: Vec<usize> = order[..budget - recent]
                .iter()
                .map(|&i| positions[i])
                .collect();
            kept.extend_from_slice(&positions[older..]);
            kept.sort_unstable();
            kept
        }
    };
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streaming_keeps_sinks_and_recent() {
        let positions: Vec<usize> = (0..10).collect();
        let kept = baseline_evict(
            EvictionPolicy::StreamingLlm { sinks: 1 },
            &positions,
            &[],
            4,
        )
        .unwrap();
        assert_eq!(kept, vec![0, 7, 8, 9]);
    }

    #[test]
    fn h2o_uniform_scores_keep_newest() {
        let positions: Vec<usize> = (0..10).collect();
        let kept = baseline_evict(EvictionPolicy::H2O, &positions, &[0.1; 10], 3).unwrap();
        assert_eq!(kept, vec![7, 8, 9]);
    }

    #[test]
    fn h2o_protects_recent_half() {
        let positions: Vec<usize> = (0..8).collect();
        let scores = [5.0, 0.1, 4.0, 0.2, 0.3, 0.0, 0.0, 0.0];
        let kept = baseline_evict(EvictionPolicy::H2O, &positions, &scores, 4).unwrap();
        assert_eq!(kept, vec![0, 2, 6, 7]);
    }

    #[test]
    fn tova_keeps_highest_latest_attention() {
        let kept = baseline_evict(EvictionPolicy::Tova, &[0, 1, 2], &[0.1, 0.7, 0.2], 2).unwrap();
        assert_eq!(kept, vec![1, 2]);
    }

    #[test]
    fn window_keeps_last_b() {
        let positions = [3, 5, 8, 13, 21];
        let kept = baseline_evict(EvictionPolicy::WindowOnly, &positions, &[], 2).unwrap();
        assert_eq!(kept, vec![13, 21]);
    }

    #[test]
    fn budget_above_count_is_noop_and_zero_rejected() {
        let kept = baseline_evict(EvictionPolicy::SnapKv, &[1, 2], &[0.3, 0.1], 5).unwrap();
        assert_eq!(kept, vec![1, 2]);
        assert!(baseline_evict(EvictionPolicy::H2O, &[1], &[0.0], 0).is_err());
    }

    #[test]
    fn score_count_must_match() {
        assert!(baseline_evict(EvictionPolicy::H2O, &[1, 2, 3], &[0.1], 2).is_err());
    }
}
