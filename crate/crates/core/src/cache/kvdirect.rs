//! Residual checkpoints and K/V reconstruction from them.

use serde::{Deserialize, Serialize};

use crate::cache::KvEntry;
use crate::error::{Error, Result};
use crate::model::Model;

/// One `d_hidden` residual kept for an evicted token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualCheckpoint {
    pub position: usize,
    pub residual: Vec<f32>,
}

/// Checkpoints holding the residual that enters `layer`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerCheckpoints {
    pub layer: usize,
    pub checkpoints: Vec<ResidualCheckpoint>,
}

/// What a KV-Direct cache stores per evicted token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CheckpointMode {
    /// One residual per token (the embedding-layer input). Deeper
    /// residuals are regenerated by replaying layers over the evicted
    /// prefix.
    Replay,
    /// The residual entering each layer, stored per layer at eviction time.
    PerLayer,
}

/// Rotation applied to reconstructed keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KeyPosition {
    /// Rotate by the absolute position. Exact on global layers only.
    Absolute,
    /// Rotate by the layer's stored RoPE position (window-relative on
    /// sliding layers). Exact everywhere.
    Stored,
}

/// Rebuilds K/V for every checkpoint from the residual entering `layer`.
pub fn recompute_kv(
    model: &Model,
    store: &LayerCheckpoints,
    layer: usize,
    key_position: KeyPosition,
) -> Result<Vec<KvEntry>> {
    if store.layer != layer {
        return Err(Error::MissingResidual(layer));
    }
    if layer >= model.config().n_layers {
        return Err(Error::Param(format!(
            "layer {layer} of {}",
            model.config().n_layers
        )));
    }
    let kind = model.config().layer_kind(layer);
    store
        .checkpoints
        .iter()
        .map(|c| {
            let rope_position = match key_position {
                KeyPosition::Absolute => c.position,
                KeyPosition::Stored => kind.rope_position(c.position),
            };
            model.project_kv(layer, &c.residual, c.position, rope_position)
        })
        .collect()
}

/// Largest element-wise absolute difference between two entry lists,
/// returned as `(max|ΔK|, max|ΔV|)`.
pub fn max_abs_delta(a: &[KvEntry], b: &[KvEntry]) -> Result<(f32, f32)> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} entries", a.len(), b.len())));
    }
    let mut dk = 0.0f32;
    let mut dv = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        if x.position != y.position || x.key.len() != y.key.len() || x.value.len() != y.value.len()
        {
            return Err(Error::Shape(format!(
                "entry mismatch at position {}",
                x.position
            )));
        }
        for (p, q) in x.key.iter().zip(&y.key) {
            dk = dk.max((p - q).abs());
        }
        for (p, q) in x.value.iter().zip(&y.value) {
            dv = dv.max((p - q).abs());
        }
    }
    Ok((dk, dv))
}
