//! Spectra of the per-head bilinear score forms `M = W_q^(h) · W_k^(g)ᵀ`.
//!
//! Before RoPE, the score between residuals `h_i` and `h_j` is
//! `RMSNorm(h_i) · M · RMSNorm(h_j)ᵀ / √d_head`, with `M` a
//! `d_hidden × d_hidden` matrix of rank at most `d_head`. Query head `h`
//! reads kv head `g = h / group`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{matmul, svd_singular_values, Matrix};

pub const ENERGY_THRESHOLDS: [f64; 3] = [0.5, 0.9, 0.99];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct EffectiveRanks {
    pub tau_50: usize,
    pub tau_90: usize,
    pub tau_99: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadSpectrum {
    pub layer: usize,
    pub q_head: usize,
    pub kv_head: usize,
    /// The leading `d_head` singular values, descending.
    pub singular_values: Vec<f64>,
    /// `E(r)` for `r = 1..=d_head`.
    pub energy: Vec<f64>,
    pub effective_rank: EffectiveRanks,
    /// `Σσ²` over the full spectrum.
    pub spectral_energy: f64,
    /// `‖M‖_F²` summed directly over the entries.
    pub frobenius_sq: f64,
}

impl HeadSpectrum {
    pub fn frobenius_rel_error(&self) -> f64 {
        (self.spectral_energy - self.frobenius_sq).abs() / self.frobenius_sq
    }

    pub fn energy_is_monotone(&self) -> bool {
        self.energy.windows(2).all(|w| w[0] <= w[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralReport {
    pub d_head: usize,
    pub heads: Vec<HeadSpectrum>,
}

impl SpectralReport {
    pub fn mean_effective_rank(&self, tau: f64) -> f64 {
        let pick = |r: &EffectiveRanks| match tau {
            t if t <= 0.5 => r.tau_50,
            t if t <= 0.9 => r.tau_90,
            _ => r.tau_99,
        };
        self.heads
            .iter()
            .map(|h| pick(&h.effective_rank) as f64)
            .sum::<f64>()
            / self.heads.len().max(1) as f64
    }
}

/// `W_q^(h) · W_k^(g)ᵀ` in f32 through the shared matmul kernel.
pub fn bilinear_matrix(model: &Model, layer: usize, q_head: usize) -> Result<Matrix> {
    let cfg = model.config();
    if layer >= cfg.n_layers || q_head >= cfg.n_q_heads {
        return Err(Error::Param(format!(
            "head ({layer}, {q_head}) out of range"
        )));
    }
    let lw = &model.weights().layers[layer];
    let g = q_head / cfg.group_size();
    let wq = lw.w_q.col_block(q_head * cfg.d_head, cfg.d_head);
    let wk = lw.w_k.col_block(g * cfg.d_head, cfg.d_head);
    matmul(&wq, &wk.transpose())
}

/// `E(r) = Σ_{i≤r} σ_i² / Σ σ²` for `r = 1..=singular_values.len()`.
pub fn energy_curve(singular_values: &[f64], total: f64) -> Vec<f64> {
    let mut running = 0.0;
    singular_values
        .iter()
        .map(|s| {
            running += s * s;
            (running / total).min(1.0)
        })
        .collect()
}

/// Smallest `r` whose leading components hold at least `tau` of the energy.
pub fn effective_rank(singular_values: &[f64], total: f64, tau: f64) -> usize {
    let mut running = 0.0;
    for (i, s) in singular_values.iter().enumerate() {
        running += s * s;
        if running >= tau * total {
            return i + 1;
        }
    }
    singular_values.len()
}

/// Spectrum of every query head at `layer`.
pub fn bilinear_spectrum(model: &Model, layer: usize) -> Result<Vec<HeadSpectrum>> {
    let cfg = model.config();
    (0..cfg.n_q_heads)
        .map(|q_head| {
            let m = bilinear_matrix(model, layer, q_head)?;
            let all = svd_singular_values(&m)?;
            let spectral_energy: f64 = all.iter().map(|s| s * s).sum();
            if spectral_energy == 0.0 {
                return Err(Error::Param(format!(
                    "head ({layer}, {q_head}) has an all-zero score form"
                )));
            }
            let head = &all[..cfg.d_head.min(all.len())];
            let r = |tau| effective_rank(head, spectral_energy, tau);
            Ok(HeadSpectrum {
                layer,
                q_head,
                kv_head: q_head / cfg.group_size(),
                singular_values: head.to_vec(),
                energy: energy_curve(head, spectral_energy),
                effective_rank: EffectiveRanks {
                    tau_50: r(0.5),
                    tau_90: r(0.9),
                    tau_99: r(0.99),
                },
                spectral_energy,
                frobenius_sq: m.frobenius_sq(),
            })
        })
        .collect()
}

pub fn spectral_report(model: &Model) -> Result<SpectralReport> {
    let mut heads = Vec::new();
    for layer in 0..model.config().n_layers {
        heads.extend(bilinear_spectrum(model, layer)?);
    }
    Ok(SpectralReport {
        d_head: model.config().d_head,
        heads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use kvdirect_oracles::{effective_rank_cumsum, jacobi_singular_values, naive_matmul};

    #[test]
    fn equal_singular_values() {
        let sv = vec![1.0; 16];
        assert_eq!(effective_rank(&sv, 16.0, 0.9), 15);
        assert_eq!(effective_rank(&sv, 16.0, 0.5), 8);
        let e = energy_curve(&sv, 16.0);
        assert_eq!(e[15], 1.0);
    }

    #[test]
    fn rank_one_form() {
        let sv = [3.0, 0.0, 0.0, 0.0];
        for tau in [0.1, 0.5, 0.9, 0.99, 1.0] {
            assert_eq!(effective_rank(&sv, 9.0, tau), 1);
        }
    }

    #[test]
    fn bilinear_matrix_matches_naive_product() {
        let m = Model::from_config(ModelConfig::toy()).unwrap();
        let cfg = m.config();
        let lw = &m.weights().layers[1];
        let wq = lw.w_q.col_block(3 * cfg.d_head, cfg.d_head);
        let wk_t = lw.w_k.col_block(cfg.d_head, cfg.d_head).transpose();
        let oracle = naive_matmul(
            wq.data(),
            wk_t.data(),
            cfg.d_hidden,
            cfg.d_head,
            cfg.d_hidden,
        );
        assert_eq!(bilinear_matrix(&m, 1, 3).unwrap().data(), oracle.as_slice());
    }

    #[test]
    fn toy_spectra_satisfy_invariants_and_match_oracle() {
        let m = Model::from_config(ModelConfig::toy()).unwrap();
        let report = spectral_report(&m).unwrap();
        assert_eq!(report.heads.len(), 16);
        for h in &report.heads {
            assert!(h.energy_is_monotone());
            assert!((h.energy[15] - 1.0).abs() < 1e-6);
            assert!(h.frobenius_rel_error() < 1e-4);
            let r = h.effective_rank;
            assert!(r.tau_50 <= r.tau_90 && r.tau_90 <= r.tau_99 && r.tau_99 <= 16);

            let mat = bilinear_matrix(&m, h.layer, h.q_head).unwrap();
            let oracle = jacobi_singular_values(mat.data(), mat.rows(), mat.cols());
            for (a, b) in h.singular_values.iter().zip(&oracle) {
                assert!((a - b).abs() <= 1e-5 * oracle[0]);
            }
            let oracle_head = &oracle[..16];
            assert_eq!(r.tau_90, effective_rank_cumsum(oracle_head, 0.9));
        }
    }
}
