//! Rotary position embedding.

use crate::error::{Error, Result};

/// Precomputed `(cos θ_i, sin θ_i)` for one position, where the `i`-th pair
/// (1-based) rotates by `θ_i = p · base^(-2i / d_head)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeRotation {
    position: usize,
    cos: Vec<f32>,
    sin: Vec<f32>,
}

impl RopeRotation {
    pub fn new(position: usize, d_head: usize, base: f64) -> Result<Self> {
        if !d_head.is_multiple_of(2) {
            return Err(Error::Config {
                field: "d_head",
                reason: format!("{d_head} is odd"),
            });
        }
        let half = d_head / 2;
        let mut cos = Vec::with_capacity(half);
        let mut sin = Vec::with_capacity(half);
        for i in 1..=half {
            let theta = position as f64 * base.powf(-2.0 * i as f64 / d_head as f64);
            cos.push(theta.cos() as f32);
            sin.push(theta.sin() as f32);
        }
        Ok(Self { position, cos, sin })
    }

    pub fn position(&self) -> usize {
        self.position
    }

    /// Rotates consecutive pairs `(x[2k], x[2k+1])` of every `d_head`-wide
    /// block in `x` in place.
    pub fn apply(&self, x: &mut [f32]) {
        let d_head = self.cos.len() * 2;
        debug_assert_eq!(x.len() % d_head, 0);
        if self.position == 0 {
            return;
        }
        for block in x.chunks_exact_mut(d_head) {
            for k in 0..self.cos.len() {
                let (a, b) = (block[2 * k], block[2 * k + 1]);
                let (c, s) = (self.cos[k], self.sin[k]);
                block[2 * k] = a * c - b * s;
                block[2 * k + 1] = a * s + b * c;
            }
        }
    }
}

/// Cache of rotations for positions `0..max`.
#[derive(Debug, Clone)]
pub struct RopeTable {
    rotations: Vec<RopeRotation>,
}

impl RopeTable {
    pub fn new(max_positions: usize, d_head: usize, base: f64) -> Result<Self> {
        let rotations = (0..max_positions)
            .map(|p| RopeRotation::new(p, d_head, base))
            .collect::<Result<_>>()?;
        Ok(Self { rotations })
    }

    pub fn get(&self, position: usize) -> Result<&RopeRotation> {
        self.rotations.get(position).ok_or(Error::PositionOverflow {
            position,
            max: self.rotations.len(),
        })
    }
}

/// Rotates a single head vector at `position`.
pub fn apply_rope(x: &[f32], position: usize, base: f64) -> Result<Vec<f32>> {
    let rot = RopeRotation::new(position, x.len(), base)?;
    let mut out = x.to_vec();
    rot.apply(&mut out);
    Ok(out)
}
