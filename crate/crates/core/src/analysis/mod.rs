//! Verification experiments built on the model and cache layers.

pub mod patch;
pub mod spectrum;
pub mod sweep;
pub mod truncation;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::Generation;
use crate::numerics::kl_divergence;

pub use patch::{
    pad_prompts, patch_all_layers, patch_and_continue, PatchOutcome, PatchSpec, PAD_BYTE,
};
pub use spectrum::{
    bilinear_matrix, bilinear_spectrum, effective_rank, energy_curve, spectral_report,
    EffectiveRanks, HeadSpectrum, SpectralReport, ENERGY_THRESHOLDS,
};
pub use sweep::{budget_sweep, SweepCell, SweepResult, SWEEP_BUDGETS};
pub use truncation::{
    check_truncation_bound, rank_truncated_generate, truncated_model, BoundCheck, TruncationResult,
};

/// Agreement between a candidate generation and a reference one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Agreement {
    pub matched: usize,
    pub total: usize,
    /// Mean over steps of `KL(candidate ‖ reference)`.
    pub mean_kl: f64,
    pub max_kl: f64,
}

impl Agreement {
    pub fn match_fraction(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.matched as f64 / self.total as f64
        }
    }

    /// Pools several agreements, weighting each step equally.
    pub fn pooled(parts: &[Agreement]) -> Agreement {
        let matched = parts.iter().map(|a| a.matched).sum();
        let total: usize = parts.iter().map(|a| a.total).sum();
        let kl_sum: f64 = parts.iter().map(|a| a.mean_kl * a.total as f64).sum();
        Agreement {
            matched,
            total,
            mean_kl: if total == 0 {
                0.0
            } else {
                kl_sum / total as f64
            },
            max_kl: parts.iter().map(|a| a.max_kl).fold(0.0, f64::max),
        }
    }
}

/// Position-wise token match and per-step KL between two free-running
/// greedy generations of the same length.
pub fn compare_generations(candidate: &Generation, reference: &Generation) -> Result<Agreement> {
    if candidate.tokens.len() != reference.tokens.len() {
        return Err(Error::Shape(format!(
            "generations of {} and {} tokens",
            candidate.tokens.len(),
            reference.tokens.len()
        )));
    }
    let matched = candidate
        .tokens
        .iter()
        .zip(&reference.tokens)
        .filter(|(a, b)| a == b)
        .count();
    let mut sum = 0.0;
    let mut max = 0.0f64;
    for (p, q) in candidate.distributions.iter().zip(&reference.distributions) {
        let kl = kl_divergence(p, q)?;
        sum += kl;
        max = max.max(kl);
    }
    let total = reference.tokens.len();
    Ok(Agreement {
        matched,
        total,
        mean_kl: if total == 0 { 0.0 } else { sum / total as f64 },
        max_kl: max,
    })
}
