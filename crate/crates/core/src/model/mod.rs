//! Pre-norm decoder-only transformer.
//!
//! Layer `ℓ` maps residuals `h^(ℓ)` to `h^(ℓ+1)`:
//!
//! ```text
//! ĥ = h + Attn(RMSNorm(h))          // GQA, RoPE on q and k, causal
//! h' = ĥ + Down(SiLU(Gate(n)) ⊙ Up(n)),  n = RMSNorm(ĥ)
//! ```
//!
//! and logits are `RMSNorm(h^(L)) · W_vocab`. Every projection is computed
//! one row at a time with the kernels in [`crate::numerics`], so a position
//! produces the same bits whether it is processed alone, inside a batch, or
//! re-derived from a checkpoint.

pub mod config;
pub mod rope;
pub mod weights;

use crate::cache::{KvCache, KvEntry, StrategyKind};
use crate::error::{Error, Result};
use crate::numerics::{self, Matrix, ProbDist};

pub use config::{ArchitectureShape, LayerKind, ModelConfig, REFERENCE_SHAPES};
pub use rope::{apply_rope, RopeRotation, RopeTable};
pub use weights::{LayerWeights, SplitMix64, Weights};

/// Residual stream captured during a forward pass. `layers[ℓ]` holds the
/// residual entering layer `ℓ` for every processed position; `layers[0]` is
/// the embedding and `layers[L]` feeds the final norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualTrace {
    pub start: usize,
    pub layers: Vec<Matrix>,
}

impl ResidualTrace {
    pub fn residual(&self, layer: usize, position: usize) -> &[f32] {
        self.layers[layer].row(position - self.start)
    }

    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, Matrix::rows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn append(&mut self, other: ResidualTrace) {
        for (mine, theirs) in self.layers.iter_mut().zip(other.layers) {
            let cols = mine.cols();
            let mut data = std::mem::take(mine).into_data();
            data.extend_from_slice(theirs.data());
            *mine = Matrix::new(data.len() / cols, cols, data).expect("same width");
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// One row of logits per processed token.
    pub logits: Matrix,
    pub trace: Option<ResidualTrace>,
}

impl ForwardOutput {
    pub fn last_logits(&self) -> &[f32] {
        self.logits.row(self.logits.rows() - 1)
    }
}

/// Output of one layer over a contiguous chunk of positions.
#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub residuals: Matrix,
    /// K/V written by the chunk, one per position.
    pub entries: Vec<KvEntry>,
    /// Per query row: post-softmax weights averaged over query heads, over
    /// the key list `prior ++ chunk[..=row]`. Masked keys get 0. Empty
    /// unless requested.
    pub attention: Vec<Vec<f32>>,
}

/// Result of a greedy decode.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<u32>,
    /// Next-token distribution that produced each generated token.
    pub distributions: Vec<ProbDist>,
}

/// Config, weights and derived tables. Immutable; share it by reference
/// across sessions and threads.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    weights: Weights,
    rope: RopeTable,
    /// Rank-truncated key projections, `[layer][q_head]`, each
    /// `d_hidden × d_head`. When present keys are stored per query head.
    truncated_keys: Option<Vec<Vec<Matrix>>>,
}

impl Model {
    pub fn new(config: ModelConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        check_weight_shapes(&config, &weights)?;
        let rope = RopeTable::new(config.max_seq_len, config.d_head, config.rope_base)?;
        Ok(Self {
            config,
            weights,
            rope,
            truncated_keys: None,
        })
    }

    /// Model with seeded weights for `config`.
    pub fn from_config(config: ModelConfig) -> Result<Self> {
        let weights = Weights::init(&config)?;
        Self::new(config, weights)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub(crate) fn with_truncated_keys(&self, keys: Vec<Vec<Matrix>>) -> Self {
        Self {
            truncated_keys: Some(keys),
            ..self.clone()
        }
    }

    pub fn is_truncated(&self) -> bool {
        self.truncated_keys.is_some()
    }

    /// Width of a stored key vector.
    pub fn key_width(&self) -> usize {
        match self.truncated_keys {
            Some(_) => self.config.q_dim(),
            None => self.config.kv_dim(),
        }
    }

    pub fn embed(&self, tokens: &[u32]) -> Result<Matrix> {
        let d = self.config.d_hidden;
        let mut out = Matrix::zeros(tokens.len(), d);
        for (i, &t) in tokens.iter().enumerate() {
            if t as usize >= self.config.vocab_size {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    vocab: self.config.vocab_size,
                });
            }
            out.row_mut(i)
                .copy_from_slice(self.weights.embedding.row(t as usize));
        }
        Ok(out)
    }

    fn normed_attn_input(&self, layer: usize, h: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0; h.len()];
        numerics::rmsnorm_into(
            h,
            &self.weights.layers[layer].gamma_attn,
            self.config.rms_eps,
            &mut out,
        );
        out
    }

    fn kv_from_normed(
        &self,
        layer: usize,
        normed: &[f32],
        position: usize,
        rope_position: usize,
    ) -> Result<KvEntry> {
        let lw = &self.weights.layers[layer];
        let rot = self.rope.get(rope_position)?;
        let mut key = match &self.truncated_keys {
            None => numerics::vecmat(normed, &lw.w_k)?,
            Some(t) => {
                let mut k = Vec::with_capacity(self.config.q_dim());
                for w in &t[layer] {
                    k.extend(numerics::vecmat(normed, w)?);
                }
                k
            }
        };
        rot.apply(&mut key);
        let value = numerics::vecmat(normed, &lw.w_v)?;
        Ok(KvEntry {
            position,
            rope_position,
            key,
            value,
        })
    }

    /// K/V for a residual `h` entering `layer`: `K = R(RMSNorm(h)·W_k)`,
    /// `V = RMSNorm(h)·W_v`, rotated at `rope_position`.
    ///
    /// This is the function both the cache-fill path and every
    /// reconstruction path call.
    pub fn project_kv(
        &self,
        layer: usize,
        h: &[f32],
        position: usize,
        rope_position: usize,
    ) -> Result<KvEntry> {
        if h.len() != self.config.d_hidden {
            return Err(Error::Shape(format!(
                "residual of length {} for d_hidden {}",
                h.len(),
                self.config.d_hidden
            )));
        }
        let normed = self.normed_attn_input(layer, h);
        self.kv_from_normed(layer, &normed, position, rope_position)
    }

    /// Runs `layer` over residuals for positions `start..start + n`.
    ///
    /// `prior` holds K/V for earlier positions in ascending position order
    /// and may contain gaps. Keys outside a sliding window are masked by
    /// position range.
    pub fn layer_forward(
        &self,
        layer: usize,
        input: &Matrix,
        start: usize,
        prior: &[KvEntry],
        record_attention: bool,
    ) -> Result<LayerOutput> {
        let cfg = &self.config;
        if layer >= cfg.n_layers {
            return Err(Error::Param(format!("layer {layer} of {}", cfg.n_layers)));
        }
        if input.cols() != cfg.d_hidden {
            return Err(Error::Shape(format!(
                "layer input width {} for d_hidden {}",
                input.cols(),
                cfg.d_hidden
            )));
        }
        if let Some(last) = prior.last() {
            if last.position >= start {
                return Err(Error::PositionRegression {
                    layer,
                    got: start,
                    last: last.position,
                });
            }
        }
        let n = input.rows();
        if start + n > cfg.max_seq_len {
            return Err(Error::PositionOverflow {
                position: start + n - 1,
                max: cfg.max_seq_len,
            });
        }
        let kind = cfg.layer_kind(layer);
        let lw = &self.weights.layers[layer];
        let d_head = cfg.d_head;
        let group = cfg.group_size();
        let scale = 1.0 / (d_head as f32).sqrt();
        let per_q_keys = self.truncated_keys.is_some();

        let mut queries = Vec::with_capacity(n);
        let mut entries = Vec::with_capacity(n);
        for i in 0..n {
            let pos = start + i;
            let rope_pos = kind.rope_position(pos);
            let normed = self.normed_attn_input(layer, input.row(i));
            let mut q = numerics::vecmat(&normed, &lw.w_q)?;
            self.rope.get(rope_pos)?.apply(&mut q);
            queries.push(q);
            entries.push(self.kv_from_normed(layer, &normed, pos, rope_pos)?);
        }

        let mut residuals = Matrix::zeros(n, cfg.d_hidden);
        let mut attention = Vec::with_capacity(if record_attention { n } else { 0 });
        let mut heads = vec![0.0f32; cfg.q_dim()];
        let mut scores: Vec<f32> = Vec::with_capacity(prior.len() + n);
        let mut visible: Vec<&KvEntry> = Vec::with_capacity(prior.len() + n);
        let mut visible_idx: Vec<usize> = Vec::with_capacity(prior.len() + n);
        let mut attn_o = vec![0.0f32; cfg.d_hidden];
        let mut normed_mlp = vec![0.0f32; cfg.d_hidden];
        let mut gate = vec![0.0f32; cfg.d_mlp];
        let mut up = vec![0.0f32; cfg.d_mlp];
        let mut mlp_out = vec![0.0f32; cfg.d_hidden];

        for i in 0..n {
            let pos = start + i;
            let lo = kind.window_start(pos);
            visible.clear();
            visible_idx.clear();
            for (j, e) in prior.iter().chain(&entries[..=i]).enumerate() {
                if e.position >= lo {
                    visible.push(e);
                    visible_idx.push(j);
                }
            }
            let mut avg = if record_attention {
                vec![0.0f32; prior.len() + i + 1]
            } else {
                Vec::new()
            };

            for h in 0..cfg.n_q_heads {
                let g = h / group;
                let q = &queries[i][h * d_head..(h + 1) * d_head];
                let k_off = if per_q_keys { h * d_head } else { g * d_head };
                scores.clear();
                for e in &visible {
                    scores.push(numerics::dot(q, &e.key[k_off..k_off + d_head]) * scale);
                }
                numerics::softmax_in_place(&mut scores);
                let out = &mut heads[h * d_head..(h + 1) * d_head];
                out.fill(0.0);
                for (w, e) in scores.iter().zip(&visible) {
                    let v = &e.value[g * d_head..(g + 1) * d_head];
                    for (o, &vv) in out.iter_mut().zip(v) {
                        *o += w * vv;
                    }
                }
                if record_attention {
                    for (w, &j) in scores.iter().zip(&visible_idx) {
                        avg[j] += w;
                    }
                }
            }
            if record_attention {
                let nq = cfg.n_q_heads as f32;
                avg.iter_mut().for_each(|a| *a /= nq);
                attention.push(avg);
            }

            numerics::vecmat_into(&heads, &lw.w_o, &mut attn_o);
            let row = residuals.row_mut(i);
            for ((r, &x), &a) in row.iter_mut().zip(input.row(i)).zip(&attn_o) {
                *r = x + a;
            }
            numerics::rmsnorm_into(row, &lw.gamma_mlp, cfg.rms_eps, &mut normed_mlp);
            numerics::vecmat_into(&normed_mlp, &lw.w_gate, &mut gate);
            numerics::vecmat_into(&normed_mlp, &lw.w_up, &mut up);
            for (g, &u) in gate.iter_mut().zip(&up) {
                *g = numerics::silu(*g) * u;
            }
            numerics::vecmat_into(&gate, &lw.w_down, &mut mlp_out);
            for (r, &m) in row.iter_mut().zip(&mlp_out) {
                *r += m;
            }
        }

        Ok(LayerOutput {
            residuals,
            entries,
            attention,
        })
    }

    /// `RMSNorm(h) · W_vocab` for each row.
    pub fn logits(&self, final_residuals: &Matrix) -> Result<Matrix> {
        let mut out = Matrix::zeros(final_residuals.rows(), self.config.vocab_size);
        let mut normed = vec![0.0f32; self.config.d_hidden];
        for i in 0..final_residuals.rows() {
            numerics::rmsnorm_into(
                final_residuals.row(i),
                &self.weights.final_gamma,
                self.config.rms_eps,
                &mut normed,
            );
            numerics::vecmat_into(&normed, &self.weights.w_vocab, out.row_mut(i));
        }
        Ok(out)
    }

    /// Processes `tokens` at the positions following what `cache` has seen.
    ///
    /// Strategies that evict see one token per step; a full cache takes the
    /// whole chunk at once. Both give identical bits.
    pub fn forward(
        &self,
        tokens: &[u32],
        cache: &mut KvCache,
        capture: bool,
    ) -> Result<ForwardOutput> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        if cache.accepts_chunks() {
            return self.forward_chunk(tokens, cache, capture);
        }
        let mut logits = Vec::with_capacity(tokens.len() * self.config.vocab_size);
        let mut trace: Option<ResidualTrace> = None;
        for t in tokens {
            let out = self.forward_chunk(std::slice::from_ref(t), cache, capture)?;
            logits.extend_from_slice(out.logits.data());
            match (&mut trace, out.trace) {
                (Some(acc), Some(tr)) => acc.append(tr),
                (None, tr) => trace = tr,
                _ => {}
            }
        }
        Ok(ForwardOutput {
            logits: Matrix::new(tokens.len(), self.config.vocab_size, logits)?,
            trace,
        })
    }

    fn forward_chunk(
        &self,
        tokens: &[u32],
        cache: &mut KvCache,
        capture: bool,
    ) -> Result<ForwardOutput> {
        let start = cache.next_position();
        if start + tokens.len() > self.config.max_seq_len {
            return Err(Error::PositionOverflow {
                position: start + tokens.len() - 1,
                max: self.config.max_seq_len,
            });
        }
        let mut h = self.embed(tokens)?;
        let mut trace = capture.then(|| ResidualTrace {
            start,
            layers: vec![h.clone()],
        });
        cache.begin_step(self)?;
        for layer in 0..self.config.n_layers {
            let prior = cache.context(self, layer)?;
            let out = self.layer_forward(layer, &h, start, &prior, cache.wants_attention())?;
            cache.commit(layer, out.entries, &h, &out.attention)?;
            h = out.residuals;
            if let Some(t) = trace.as_mut() {
                t.layers.push(h.clone());
            }
        }
        cache.end_step(tokens.len());
        Ok(ForwardOutput {
            logits: self.logits(&h)?,
            trace,
        })
    }

    /// Cache-free pass over a whole sequence starting at position 0.
    pub fn forward_batch(&self, tokens: &[u32], capture: bool) -> Result<ForwardOutput> {
        let mut cache = KvCache::new(StrategyKind::Full, &self.config)?;
        self.forward(tokens, &mut cache, capture)
    }

    /// Continues from residuals entering `layer` at positions `0..n` and
    /// returns the final logits. `layer = L` only applies the unembedding.
    pub fn forward_from_layer(&self, layer: usize, residuals: &Matrix) -> Result<Matrix> {
        if layer > self.config.n_layers {
            return Err(Error::Param(format!(
                "layer {layer} of {}",
                self.config.n_layers
            )));
        }
        let mut h = residuals.clone();
        for l in layer..self.config.n_layers {
            h = self.layer_forward(l, &h, 0, &[], false)?.residuals;
        }
        self.logits(&h)
    }

    /// Greedy decoding; ties go to the lowest token id.
    pub fn greedy_decode(
        &self,
        prompt: &[u32],
        n_new: usize,
        cache: &mut KvCache,
    ) -> Result<Generation> {
        if n_new == 0 {
            return Err(Error::Param("n_new must be at least 1".into()));
        }
        let mut out = self.forward(prompt, cache, false)?;
        let mut tokens = Vec::with_capacity(n_new);
        let mut distributions = Vec::with_capacity(n_new);
        for step in 0..n_new {
            let dist = numerics::softmax(out.last_logits())?;
            let next = numerics::argmax(out.last_logits()) as u32;
            tokens.push(next);
            distributions.push(dist);
            if step + 1 < n_new {
                out = self.forward(&[next], cache, false)?;
            }
        }
        Ok(Generation {
            tokens,
            distributions,
        })
    }

    /// Greedy decoding that keeps no state: every step re-runs the entire
    /// sequence from the embeddings.
    pub fn greedy_decode_scratch(&self, prompt: &[u32], n_new: usize) -> Result<Generation> {
        if n_new == 0 {
            return Err(Error::Param("n_new must be at least 1".into()));
        }
        if prompt.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        let mut seq = prompt.to_vec();
        let mut tokens = Vec::with_capacity(n_new);
        let mut distributions = Vec::with_capacity(n_new);
        for _ in 0..n_new {
            let out = self.forward_batch(&seq, false)?;
            let next = numerics::argmax(out.last_logits()) as u32;
            distributions.push(numerics::softmax(out.last_logits())?);
            tokens.push(next);
            seq.push(next);
        }
        Ok(Generation {
            tokens,
            distributions,
        })
    }
}

fn check_weight_shapes(c: &ModelConfig, w: &Weights) -> Result<()> {
    let d = c.d_hidden;
    let want = |name: &str, m: &Matrix, r: usize, cols: usize| -> Result<()> {
        if m.rows() != r || m.cols() != cols {
            return Err(Error::Shape(format!(
                "{name} is {}x{}, expected {r}x{cols}",
                m.rows(),
                m.cols()
            )));
        }
        Ok(())
    };
    want("embedding", &w.embedding, c.vocab_size, d)?;
    want("w_vocab", &w.w_vocab, d, c.vocab_size)?;
    if w.layers.len() != c.n_layers || w.final_gamma.len() != d {
        return Err(Error::Shape("layer count or final gamma width".into()));
    }
    for l in &w.layers {
        want("w_q", &l.w_q, d, c.q_dim())?;
        want("w_k", &l.w_k, d, c.kv_dim())?;
        want("w_v", &l.w_v, d, c.kv_dim())?;
        want("w_o", &l.w_o, c.q_dim(), d)?;
        want("w_gate", &l.w_gate, d, c.d_mlp)?;
        want("w_up", &l.w_up, d, c.d_mlp)?;
        want("w_down", &l.w_down, c.d_mlp, d)?;
        if l.gamma_attn.len() != d || l.gamma_mlp.len() != d {
            return Err(Error::Shape("norm gamma width".into()));
        }
    }
    Ok(())
}

/// Encodes a byte string as token ids (vocabulary = bytes).
pub fn byte_tokens(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| b as u32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Model {
        Model::from_config(ModelConfig::toy()).unwrap()
    }

    #[test]
    fn single_token_logits_are_finite_distribution() {
        let m = toy();
        let out = m.forward_batch(&[65], false).unwrap();
        assert!(out.logits.is_finite());
        let p = numerics::softmax(out.last_logits()).unwrap();
        let total: f64 = p.probs().iter().map(|&x| x as f64).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn incremental_matches_batch_bitwise() {
        for config in [ModelConfig::toy(), ModelConfig::toy_mixed()] {
            let m = Model::from_config(config).unwrap();
            let tokens = byte_tokens(b"incremental prefill equals batch prefill!");
            let batch = m.forward_batch(&tokens, true).unwrap();
            let mut cache = KvCache::new(StrategyKind::Full, m.config()).unwrap();
            let mut rows = Vec::new();
            for t in &tokens {
                rows.extend_from_slice(m.forward(&[*t], &mut cache, false).unwrap().logits.data());
            }
            assert_eq!(batch.logits.data(), rows.as_slice());
        }
    }

    #[test]
    fn causal_suffix_perturbation() {
        let m = Model::from_config(ModelConfig::toy_mixed()).unwrap();
        let a = byte_tokens(b"shared prefix then AAAA");
        let mut b = a.clone();
        for t in b.iter_mut().skip(19) {
            *t = b'z' as u32;
        }
        let la = m.forward_batch(&a, false).unwrap().logits;
        let lb = m.forward_batch(&b, false).unwrap().logits;
        for p in 0..19 {
            assert_eq!(la.row(p), lb.row(p));
        }
        assert_ne!(la.row(20), lb.row(20));
    }

    #[test]
    fn restart_from_any_layer_reproduces_logits() {
        let m = Model::from_config(ModelConfig::toy_mixed()).unwrap();
        let tokens = byte_tokens(b"markov at every depth");
        let full = m.forward_batch(&tokens, true).unwrap();
        let trace = full.trace.unwrap();
        assert_eq!(trace.layers.len(), m.config().n_layers + 1);
        assert_eq!(trace.layers[0], m.embed(&tokens).unwrap());
        for layer in 0..=m.config().n_layers {
            let restarted = m.forward_from_layer(layer, &trace.layers[layer]).unwrap();
            assert_eq!(restarted, full.logits, "layer {layer}");
        }
    }

    #[test]
    fn rejects_bad_tokens_and_overflow() {
        let m = toy();
        assert!(matches!(
            m.forward_batch(&[256], false),
            Err(Error::TokenOutOfRange { .. })
        ));
        let mut c = ModelConfig::toy();
        c.max_seq_len = 4;
        let m = Model::from_config(c).unwrap();
        assert!(matches!(
            m.forward_batch(&[1, 2, 3, 4, 5], false),
            Err(Error::PositionOverflow { .. })
        ));
    }

    #[test]
    fn greedy_single_step_is_argmax() {
        let m = toy();
        let mut cache = KvCache::new(StrategyKind::Full, m.config()).unwrap();
        let g = m.greedy_decode(&[72], 1, &mut cache).unwrap();
        let direct = numerics::argmax(m.forward_batch(&[72], false).unwrap().last_logits());
        assert_eq!(g.tokens, vec![direct as u32]);
    }

    #[test]
    fn cached_and_scratch_decoding_agree() {
        let m = Model::from_config(ModelConfig::toy_mixed()).unwrap();
        let prompt = byte_tokens(b"Greedy decoding test");
        let mut cache = KvCache::new(StrategyKind::Full, m.config()).unwrap();
        let cached = m.greedy_decode(&prompt, 30, &mut cache).unwrap();
        let scratch = m.greedy_decode_scratch(&prompt, 30).unwrap();
        assert_eq!(cached, scratch);
        let mut again = KvCache::new(StrategyKind::Full, m.config()).unwrap();
        assert_eq!(m.greedy_decode(&prompt, 30, &mut again).unwrap(), cached);
    }
}
