use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Attention pattern of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum LayerKind {
    Global,
    /// Attends to the last `window` positions, keys rotated by their
    /// window-relative offset.
    Sliding {
        window: usize,
    },
}

impl LayerKind {
    /// Position handed to RoPE for a token at absolute position `pos`.
    ///
    /// Sliding layers rotate by the offset from the window start in effect
    /// when the token was written, `pos - max(0, pos - w + 1)`.
    pub fn rope_position(self, pos: usize) -> usize {
        match self {
            LayerKind::Global => pos,
            LayerKind::Sliding { window } => pos - pos.saturating_sub(window - 1),
        }
    }

    /// First key position visible to a query at `pos`.
    pub fn window_start(self, pos: usize) -> usize {
        match self {
            LayerKind::Global => 0,
            LayerKind::Sliding { window } => pos.saturating_sub(window - 1),
        }
    }

    pub fn is_sliding(self) -> bool {
        matches!(self, LayerKind::Sliding { .. })
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerKind::Global => f.write_str("global"),
            LayerKind::Sliding { window } => write!(f, "sliding:{window}"),
        }
    }
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("global") || s.eq_ignore_ascii_case("g") {
            return Ok(LayerKind::Global);
        }
        let rest = s
            .strip_prefix("sliding:")
            .or_else(|| s.strip_prefix("s:"))
            .ok_or_else(|| Error::Config {
                field: "layer_kinds",
                reason: format!("unknown layer kind `{s}` (expected `global` or `sliding:<w>`)"),
            })?;
        let window = rest.parse::<usize>().map_err(|e| Error::Config {
            field: "layer_kinds",
            reason: format!("bad window `{rest}`: {e}"),
        })?;
        Ok(LayerKind::Sliding { window })
    }
}

impl From<LayerKind> for String {
    fn from(k: LayerKind) -> Self {
        k.to_string()
    }
}

impl TryFrom<String> for LayerKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Architecture hyperparameters. Together with `seed` this fully determines
/// the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_hidden: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    /// One entry per layer. Empty means all global.
    #[serde(default)]
    pub layer_kinds: Vec<LayerKind>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Element width used by memory accounting only; kernels run in f32.
    #[serde(default = "default_bytes_per_elem")]
    pub bytes_per_elem: usize,
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
    #[serde(default = "default_rms_eps")]
    pub rms_eps: f32,
}

fn default_rope_base() -> f64 {
    10_000.0
}
fn default_seed() -> u64 {
    42
}
fn default_bytes_per_elem() -> usize {
    4
}
fn default_max_seq_len() -> usize {
    1024
}
fn default_rms_eps() -> f32 {
    1e-6
}

impl ModelConfig {
    /// The all-global toy model used by the experiments.
    pub fn toy() -> Self {
        Self {
            n_layers: 4,
            d_hidden: 64,
            n_q_heads: 4,
            n_kv_heads: 2,
            d_head: 16,
            d_mlp: 128,
            vocab_size: 256,
            rope_base: default_rope_base(),
            layer_kinds: vec![LayerKind::Global; 4],
            seed: default_seed(),
            bytes_per_elem: default_bytes_per_elem(),
            max_seq_len: default_max_seq_len(),
            rms_eps: default_rms_eps(),
        }
    }

    /// Toy model whose second layer is `Sliding { window: 8 }`.
    pub fn toy_mixed() -> Self {
        let mut c = Self::toy();
        c.layer_kinds[1] = LayerKind::Sliding { window: 8 };
        c
    }

    pub fn validate(&self) -> Result<()> {
        let positive: [(&'static str, usize); 9] = [
            ("n_layers", self.n_layers),
            ("d_hidden", self.d_hidden),
            ("n_q_heads", self.n_q_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("d_head", self.d_head),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("bytes_per_elem", self.bytes_per_elem),
            ("max_seq_len", self.max_seq_len),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::Config {
                    field,
                    reason: "must be at least 1".into(),
                });
            }
        }
        if !self.n_q_heads.is_multiple_of(self.n_kv_heads) {
            return Err(Error::Config {
                field: "n_q_heads",
                reason: format!(
                    "{} is not divisible by n_kv_heads = {}",
                    self.n_q_heads, self.n_kv_heads
                ),
            });
        }
        if !self.d_head.is_multiple_of(2) {
            return Err(Error::Config {
                field: "d_head",
                reason: format!("{} is odd; RoPE rotates pairs", self.d_head),
            });
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return Err(Error::Config {
                field: "rope_base",
                reason: format!("{} is not positive", self.rope_base),
            });
        }
        if !(self.rms_eps.is_finite() && self.rms_eps >= 0.0) {
            return Err(Error::Config {
                field: "rms_eps",
                reason: format!("{} is negative", self.rms_eps),
            });
        }
        if !self.layer_kinds.is_empty() && self.layer_kinds.len() != self.n_layers {
            return Err(Error::Config {
                field: "layer_kinds",
                reason: format!(
                    "{} entries for {} layers",
                    self.layer_kinds.len(),
                    self.n_layers
                ),
            });
        }
        if self
            .layer_kinds
            .iter()
            .any(|k| matches!(k, LayerKind::Sliding { window: 0 }))
        {
            return Err(Error::Config {
                field: "layer_kinds",
                reason: "sliding window must be at least 1".into(),
            });
        }
        Ok(())
    }

    pub fn layer_kind(&self, layer: usize) -> LayerKind {
        self.layer_kinds
            .get(layer)
            .copied()
            .unwrap_or(LayerKind::Global)
    }

    pub fn group_size(&self) -> usize {
        self.n_q_heads / self.n_kv_heads
    }

    pub fn q_dim(&self) -> usize {
        self.n_q_heads * self.d_head
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.d_head
    }
}

/// Published architecture shapes used as inputs to memory accounting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ArchitectureShape {
    pub name: &'static str,
    pub n_layers: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub d_hidden: usize,
    pub bytes_per_elem: usize,
    /// Count of sliding-window layers (informational).
    pub sliding_layers: usize,
}

pub const REFERENCE_SHAPES: [ArchitectureShape; 6] = [
    ArchitectureShape {
        name: "SmolLM2-135M",
        n_layers: 30,
        n_q_heads: 9,
        n_kv_heads: 3,
        d_head: 64,
        d_hidden: 576,
        bytes_per_elem: 2,
        sliding_layers: 0,
    },
    ArchitectureShape {
        name: "Qwen2.5-0.5B",
        n_layers: 24,
        n_q_heads: 14,
        n_kv_heads: 2,
        d_head: 64,
        d_hidden: 896,
        bytes_per_elem: 2,
        sliding_layers: 0,
    },
    ArchitectureShape {
        name: "Qwen3-0.6B",
        n_layers: 28,
        n_q_heads: 16,
        n_kv_heads: 8,
        d_head: 128,
        d_hidden: 1024,
        bytes_per_elem: 2,
        sliding_layers: 0,
    },
    ArchitectureShape {
        name: "DS-R1-Distill-1.5B",
        n_layers: 28,
        n_q_heads: 12,
        n_kv_heads: 2,
        d_head: 128,
        d_hidden: 1536,
        bytes_per_elem: 2,
        sliding_layers: 0,
    },
    ArchitectureShape {
        name: "Qwen2.5-1.5B",
        n_layers: 28,
        n_q_heads: 12,
        n_kv_heads: 2,
        d_head: 128,
        d_hidden: 1536,
        bytes_per_elem: 2,
        sliding_layers: 0,
    },
    ArchitectureShape {
        name: "Gemma3-4B",
        n_layers: 34,
        n_q_heads: 8,
        n_kv_heads: 4,
        d_head: 256,
        d_hidden: 2560,
        bytes_per_elem: 2,
        sliding_layers: 29,
    },
];

impl From<&ModelConfig> for ArchitectureShape {
    fn from(c: &ModelConfig) -> Self {
        ArchitectureShape {
            name: "custom",
            n_layers: c.n_layers,
            n_q_heads: c.n_q_heads,
            n_kv_heads: c.n_kv_heads,
            d_head: c.d_head,
            d_hidden: c.d_hidden,
            bytes_per_elem: c.bytes_per_elem,
            sliding_layers: c.layer_kinds.iter().filter(|k| k.is_sliding()).count(),
        }
    }
}
