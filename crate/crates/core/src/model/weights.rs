//! Seeded weight generation and the on-disk weight format.
//!
//! Every scalar comes from one splitmix64 stream seeded with
//! `ModelConfig::seed`, consumed in this order:
//!
//! 1. `embedding` (vocab × d_hidden)
//! 2. per layer: `gamma_attn`, `w_q`, `w_k`, `w_v`, `w_o`, `gamma_mlp`,
//!    `w_gate`, `w_up`, `w_down`
//! 3. `final_gamma`, `w_vocab`
//!
//! Matrices are filled row-major. A 64-bit draw `x` maps to
//! `u = (x >> 11) · 2⁻⁵³ ∈ [0, 1)`, then `(2u − 1) · s` with
//! `s = 1/√d_hidden`, rounded once to f32. Norm scales are `1 + (2u − 1) · s`.
//!
//! # File layout (little-endian)
//!
//! | field | type |
//! |---|---|
//! | magic `b"KVDW"` | 4 bytes |
//! | version (=1) | u32 |
//! | n_layers, d_hidden, n_q_heads, n_kv_heads, d_head, d_mlp, vocab_size, seed, bytes_per_elem, max_seq_len | u64 each |
//! | rope_base, rms_eps | f64 each |
//! | layer kinds, one per layer (0 = global, w = sliding window w) | u64 each |
//! | scalar count | u64 |
//! | scalars in generation order | f32 each |

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::model::config::{LayerKind, ModelConfig};
use crate::numerics::Matrix;

pub const WEIGHT_MAGIC: [u8; 4] = *b"KVDW";
pub const WEIGHT_VERSION: u32 = 1;

/// Vigna's splitmix64.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in `[-scale, scale)`.
    pub fn next_symmetric(&mut self, scale: f64) -> f32 {
        let u = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        ((2.0 * u - 1.0) * scale) as f32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub gamma_attn: Vec<f32>,
    /// d_hidden × (n_q · d_head)
    pub w_q: Matrix,
    /// d_hidden × (n_kv · d_head)
    pub w_k: Matrix,
    pub w_v: Matrix,
    /// (n_q · d_head) × d_hidden
    pub w_o: Matrix,
    pub gamma_mlp: Vec<f32>,
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_gamma: Vec<f32>,
    pub w_vocab: Matrix,
}

struct Filler {
    rng: SplitMix64,
    scale: f64,
}

impl Filler {
    fn matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols)
            .map(|_| self.rng.next_symmetric(self.scale))
            .collect();
        Matrix::new(rows, cols, data).expect("sized by construction")
    }

    fn gamma(&mut self, n: usize) -> Vec<f32> {
        (0..n)
            .map(|_| 1.0 + self.rng.next_symmetric(self.scale))
            .collect()
    }
}

impl Weights {
    /// Deterministic weights for `config`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_hidden;
        let mut f = Filler {
            rng: SplitMix64::new(config.seed),
            scale: 1.0 / (d as f64).sqrt(),
        };
        let embedding = f.matrix(config.vocab_size, d);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                gamma_attn: f.gamma(d),
                w_q: f.matrix(d, config.q_dim()),
                w_k: f.matrix(d, config.kv_dim()),
                w_v: f.matrix(d, config.kv_dim()),
                w_o: f.matrix(config.q_dim(), d),
                gamma_mlp: f.gamma(d),
                w_gate: f.matrix(d, config.d_mlp),
                w_up: f.matrix(d, config.d_mlp),
                w_down: f.matrix(config.d_mlp, d),
            })
            .collect();
        let final_gamma = f.gamma(d);
        let w_vocab = f.matrix(d, config.vocab_size);
        Ok(Self {
            embedding,
            layers,
            final_gamma,
            w_vocab,
        })
    }

    fn arrays(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![self.embedding.data()];
        for l in &self.layers {
            out.extend([
                l.gamma_attn.as_slice(),
                l.w_q.data(),
                l.w_k.data(),
                l.w_v.data(),
                l.w_o.data(),
                l.gamma_mlp.as_slice(),
                l.w_gate.data(),
                l.w_up.data(),
                l.w_down.data(),
            ]);
        }
        out.push(&self.final_gamma);
        out.push(self.w_vocab.data());
        out
    }

    fn arrays_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = vec![self.embedding.data_mut()];
        for l in &mut self.layers {
            out.push(l.gamma_attn.as_mut_slice());
            out.push(l.w_q.data_mut());
            out.push(l.w_k.data_mut());
            out.push(l.w_v.data_mut());
            out.push(l.w_o.data_mut());
            out.push(l.gamma_mlp.as_mut_slice());
            out.push(l.w_gate.data_mut());
            out.push(l.w_up.data_mut());
            out.push(l.w_down.data_mut());
        }
        out.push(&mut self.final_gamma);
        out.push(self.w_vocab.data_mut());
        out
    }

    pub fn scalar_count(&self) -> usize {
        self.arrays().iter().map(|a| a.len()).sum()
    }

    /// Writes header and scalars in the documented layout.
    pub fn write_to<W: Write>(&self, config: &ModelConfig, mut w: W) -> Result<()> {
        w.write_all(&WEIGHT_MAGIC)?;
        w.write_all(&WEIGHT_VERSION.to_le_bytes())?;
        for v in [
            config.n_layers,
            config.d_hidden,
            config.n_q_heads,
            config.n_kv_heads,
            config.d_head,
            config.d_mlp,
            config.vocab_size,
        ] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        w.write_all(&config.seed.to_le_bytes())?;
        w.write_all(&(config.bytes_per_elem as u64).to_le_bytes())?;
        w.write_all(&(config.max_seq_len as u64).to_le_bytes())?;
        w.write_all(&config.rope_base.to_le_bytes())?;
        w.write_all(&(config.rms_eps as f64).to_le_bytes())?;
        for layer in 0..config.n_layers {
            let tag = match config.layer_kind(layer) {
                LayerKind::Global => 0u64,
                LayerKind::Sliding { window } => window as u64,
            };
            w.write_all(&tag.to_le_bytes())?;
        }
        w.write_all(&(self.scalar_count() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.scalar_count() * 4);
        for a in self.arrays() {
            for x in a {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        w.flush()?;
        Ok(())
    }

    /// Reads a weight file, returning the embedded config.
    pub fn read_from<R: Read>(mut r: R) -> Result<(ModelConfig, Weights)> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != WEIGHT_MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let version = u32::from_le_bytes(read_array(&mut r)?);
        if version != WEIGHT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let mut u = || -> Result<u64> { Ok(u64::from_le_bytes(read_array(&mut r)?)) };
        let n_layers = u()? as usize;
        let d_hidden = u()? as usize;
        let n_q_heads = u()? as usize;
        let n_kv_heads = u()? as usize;
        let d_head = u()? as usize;
        let d_mlp = u()? as usize;
        let vocab_size = u()? as usize;
        let seed = u()?;
        let bytes_per_elem = u()? as usize;
        let max_seq_len = u()? as usize;
        let rope_base = f64::from_le_bytes(read_array(&mut r)?);
        let rms_eps = f64::from_le_bytes(read_array(&mut r)?) as f32;
        if n_layers > 1 << 16 {
            return Err(Error::Format(format!("implausible layer count {n_layers}")));
        }
        let mut layer_kinds = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let tag = u64::from_le_bytes(read_array(&mut r)?);
            layer_kinds.push(if tag == 0 {
                LayerKind::Global
            } else {
                LayerKind::Sliding {
                    window: tag as usize,
                }
            });
        }
        let config = ModelConfig {
            n_layers,
            d_hidden,
            n_q_heads,
            n_kv_heads,
            d_head,
            d_mlp,
            vocab_size,
            rope_base,
            layer_kinds,
            seed,
            bytes_per_elem,
            max_seq_len,
            rms_eps,
        };
        config.validate()?;

        // Shapes come from the config; values are overwritten below.
        let mut weights = Weights::zeros(&config);
        let count = u64::from_le_bytes(read_array(&mut r)?) as usize;
        if count != weights.scalar_count() {
            return Err(Error::Format(format!(
                "file holds {count} scalars, config implies {}",
                weights.scalar_count()
            )));
        }
        let mut bytes = vec![0u8; count * 4];
        r.read_exact(&mut bytes).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Format("truncated file".into()),
            _ => Error::Io(e),
        })?;
        let mut values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        for a in weights.arrays_mut() {
            for (slot, v) in a.iter_mut().zip(&mut values) {
                *slot = v;
            }
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Format("trailing bytes after weights".into()));
        }
        Ok((config, weights))
    }

    fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_hidden;
        Self {
            embedding: Matrix::zeros(config.vocab_size, d),
            layers: (0..config.n_layers)
                .map(|_| LayerWeights {
                    gamma_attn: vec![0.0; d],
                    w_q: Matrix::zeros(d, config.q_dim()),
                    w_k: Matrix::zeros(d, config.kv_dim()),
                    w_v: Matrix::zeros(d, config.kv_dim()),
                    w_o: Matrix::zeros(config.q_dim(), d),
                    gamma_mlp: vec![0.0; d],
                    w_gate: Matrix::zeros(d, config.d_mlp),
                    w_up: Matrix::zeros(d, config.d_mlp),
                    w_down: Matrix::zeros(config.d_mlp, d),
                })
                .collect(),
            final_gamma: vec![0.0; d],
            w_vocab: Matrix::zeros(d, config.vocab_size),
        }
    }
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated file".into()),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}
