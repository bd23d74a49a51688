//! Rank-truncated attention scores.
//!
//! For query head `h`, the best rank-`r` approximation of its score form is
//! `M_r = M · V_r V_rᵀ`, with `V_r` the leading right singular vectors of
//! `M`. Folding `V_r V_rᵀ` into the key projection gives the truncated
//! keys `RMSNorm(h) · V_r V_rᵀ W_k^(g)`, so generation runs unchanged
//! through the regular forward pass. The element-wise error of the score
//! is bounded by `σ_{r+1} · ‖x_i‖ · ‖x_j‖ / √d_head`.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::analysis::{compare_generations, Agreement};
use crate::cache::{KvCache, StrategyKind};
use crate::error::{Error, Result};
use crate::model::{Model, SplitMix64};
use crate::numerics::{svd, Matrix};

use super::spectrum::bilinear_matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TruncationResult {
    pub rank: usize,
    pub match_fraction: f64,
    pub mean_kl: f64,
    pub max_kl: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundCheck {
    pub layer: usize,
    pub q_head: usize,
    pub rank: usize,
    pub pairs: usize,
    pub violations: usize,
    /// Largest observed `|a − ã| / bound`.
    pub max_ratio: f64,
}

fn check_rank(model: &Model, rank: usize) -> Result<()> {
    let d_head = model.config().d_head;
    if rank == 0 || rank > d_head {
        return Err(Error::Param(format!("rank {rank} outside 1..={d_head}")));
    }
    Ok(())
}

fn dmatrix(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_iterator(m.rows(), m.cols(), m.data().iter().map(|&x| x as f64))
}

/// Copy of `model` whose keys are computed through rank-`rank` projectors.
pub fn truncated_model(model: &Model, rank: usize) -> Result<Model> {
    check_rank(model, rank)?;
    let cfg = model.config();
    let mut keys = Vec::with_capacity(cfg.n_layers);
    for layer in 0..cfg.n_layers {
        let lw = &model.weights().layers[layer];
        let mut per_head = Vec::with_capacity(cfg.n_q_heads);
        for h in 0..cfg.n_q_heads {
            let g = h / cfg.group_size();
            let dec = svd(&bilinear_matrix(model, layer, h)?)?;
            let v_r = dec.v.columns(0, rank);
            let projector = v_r * v_r.transpose();
            let w_k = dmatrix(&lw.w_k.col_block(g * cfg.d_head, cfg.d_head));
            let w = projector * w_k;
            let data = (0..w.nrows())
                .flat_map(|i| (0..w.ncols()).map(move |j| (i, j)))
                .map(|(i, j)| w[(i, j)] as f32);
            per_head.push(Matrix::new(w.nrows(), w.ncols(), data.collect())?);
        }
        keys.push(per_head);
    }
    Ok(model.with_truncated_keys(keys))
}

/// Greedy generation with rank-`rank` scores against the full-rank model.
pub fn rank_truncated_generate(
    model: &Model,
    rank: usize,
    prompt: &[u32],
    n_new: usize,
) -> Result<TruncationResult> {
    let truncated = truncated_model(model, rank)?;
    let mut full_cache = KvCache::new(StrategyKind::Full, model.config())?;
    let reference = model.greedy_decode(prompt, n_new, &mut full_cache)?;
    let mut cache = KvCache::new(StrategyKind::Full, truncated.config())?;
    let candidate = truncated.greedy_decode(prompt, n_new, &mut cache)?;
    let a: Agreement = compare_generations(&candidate, &reference)?;
    Ok(TruncationResult {
        rank,
        match_fraction: a.match_fraction(),
        mean_kl: a.mean_kl,
        max_kl: a.max_kl,
    })
}

/// Samples `pairs` random vector pairs per head and checks the score-error
/// bound in f64 against the rank-`rank` approximation of each head's form.
pub fn check_truncation_bound(
    model: &Model,
    rank: usize,
    pairs: usize,
    seed: u64,
) -> Result<Vec<BoundCheck>> {
    check_rank(model, rank)?;
    let cfg = model.config();
    let d = cfg.d_hidden;
    let scale = (cfg.d_head as f64).sqrt();
    let mut rng = SplitMix64::new(seed);
    let mut out = Vec::new();
    for layer in 0..cfg.n_layers {
        for q_head in 0..cfg.n_q_heads {
            let m = bilinear_matrix(model, layer, q_head)?;
            let dec = svd(&m)?;
            let m64 = dmatrix(&m);
            let sigma_next = dec.singular_values.get(rank).copied().unwrap_or(0.0);
            let u_r = dec.u.columns(0, rank);
            let v_r = dec.v.columns(0, rank);
            let s_r = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(
                &dec.singular_values[..rank],
            ));
            let residual = &m64 - u_r * s_r * v_r.transpose();
            let mut violations = 0;
            let mut max_ratio = 0.0f64;
            for _ in 0..pairs {
                let xi = nalgebra::DVector::from_iterator(
                    d,
                    (0..d).map(|_| rng.next_symmetric(1.0) as f64),
                );
                let xj = nalgebra::DVector::from_iterator(
                    d,
                    (0..d).map(|_| rng.next_symmetric(1.0) as f64),
                );
                let err = (xi.transpose() * &residual * &xj)[(0, 0)].abs() / scale;
                let bound = sigma_next * xi.norm() * xj.norm() / scale;
                if err > bound {
                    violations += 1;
                }
                if bound > 0.0 {
                    max_ratio = max_ratio.max(err / bound);
                }
            }
            out.push(BoundCheck {
                layer,
                q_head,
                rank,
                pairs,
                violations,
                max_ratio,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{byte_tokens, ModelConfig};

    #[test]
    fn full_rank_is_lossless() {
        let m = Model::from_config(ModelConfig::toy()).unwrap();
        let r = rank_truncated_generate(&m, 16, &byte_tokens(b"no truncation at all"), 12).unwrap();
        assert_eq!(r.match_fraction, 1.0);
        assert!(r.max_kl < 1e-6);
    }

    #[test]
    fn rank_out_of_range_rejected() {
        let m = Model::from_config(ModelConfig::toy()).unwrap();
        assert!(truncated_model(&m, 0).is_err());
        assert!(truncated_model(&m, 17).is_err());
    }

    #[test]
    fn bound_holds_at_low_rank() {
        let m = Model::from_config(ModelConfig::toy()).unwrap();
        for check in check_truncation_bound(&m, 1, 200, 7).unwrap() {
            assert_eq!(check.violations, 0);
            assert!(check.max_ratio <= 1.0);
        }
    }

    #[test]
    fn truncated_keys_are_per_query_head() {
        let m = Model::from_config(ModelConfig::toy()).unwrap();
        let t = truncated_model(&m, 4).unwrap();
        assert!(t.is_truncated());
        assert_eq!(t.key_width(), m.config().q_dim());
    }
}
