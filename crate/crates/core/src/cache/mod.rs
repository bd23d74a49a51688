//! Pluggable KV-cache strategies.
//!
//! A [`KvCache`] is owned by one decode session. For every layer of every
//! step the model asks it for the K/V of earlier positions
//! ([`KvCache::context`]), runs attention, then hands back the new entries
//! ([`KvCache::commit`]), at which point the strategy evicts.
//!
//! KV-Direct assembles `recomputed(evicted) ++ resident ++ new` in position
//! order and, when more than `B` entries are resident after a step, moves
//! the oldest one out and keeps its residual instead.

pub mod accounting;
pub mod evict;
pub mod kvdirect;

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::Matrix;

pub use accounting::{cost_model, memory_report, MemoryReport, RecomputeCost};
pub use evict::{baseline_evict, EvictionPolicy};
pub use kvdirect::{
    max_abs_delta, recompute_kv, CheckpointMode, KeyPosition, LayerCheckpoints, ResidualCheckpoint,
};

/// Post-RoPE key and value for one position at one layer. `key` and `value`
/// concatenate the kv heads (or the query heads, for rank-truncated keys).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvEntry {
    pub position: usize,
    /// Position the key was rotated by; equals `position` on global layers.
    pub rope_position: usize,
    pub key: Vec<f32>,
    pub value: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum StrategyKind {
    Full,
    WindowOnly {
        budget: usize,
    },
    H2O {
        budget: usize,
    },
    StreamingLlm {
        budget: usize,
        sinks: usize,
    },
    SnapKv {
        budget: usize,
        obs_window: usize,
    },
    Tova {
        budget: usize,
    },
    KvDirect {
        budget: usize,
        checkpoint: CheckpointMode,
    },
}

pub const DEFAULT_SINKS: usize = 1;
pub const DEFAULT_OBS_WINDOW: usize = 4;

impl StrategyKind {
    pub fn budget(&self) -> Option<usize> {
        match *self {
            StrategyKind::Full => None,
            StrategyKind::WindowOnly { budget }
            | StrategyKind::H2O { budget }
            | StrategyKind::StreamingLlm { budget, .. }
            | StrategyKind::SnapKv { budget, .. }
            | StrategyKind::Tova { budget }
            | StrategyKind::KvDirect { budget, .. } => Some(budget),
        }
    }

    /// Same strategy with a different budget; `Full` is unchanged.
    pub fn with_budget(self, b: usize) -> Self {
        match self {
            StrategyKind::Full => StrategyKind::Full,
            StrategyKind::WindowOnly { .. } => StrategyKind::WindowOnly { budget: b },
            StrategyKind::H2O { .. } => StrategyKind::H2O { budget: b },
            StrategyKind::StreamingLlm { sinks, .. } => {
                StrategyKind::StreamingLlm { budget: b, sinks }
            }
            StrategyKind::SnapKv { obs_window, .. } => StrategyKind::SnapKv {
                budget: b,
                obs_window,
            },
            StrategyKind::Tova { .. } => StrategyKind::Tova { budget: b },
            StrategyKind::KvDirect { checkpoint, .. } => StrategyKind::KvDirect {
                budget: b,
                checkpoint,
            },
        }
    }

    /// Whether tokens outside the budget are lost for good.
    pub fn is_lossy(&self) -> bool {
        !matches!(self, StrategyKind::Full | StrategyKind::KvDirect { .. })
    }

    pub fn family(&self) -> &'static str {
        match self {
            StrategyKind::Full => "full",
            StrategyKind::WindowOnly { .. } => "window",
            StrategyKind::H2O { .. } => "h2o",
            StrategyKind::StreamingLlm { .. } => "streaming",
            StrategyKind::SnapKv { .. } => "snapkv",
            StrategyKind::Tova { .. } => "tova",
            StrategyKind::KvDirect {
                checkpoint: CheckpointMode::Replay,
                ..
            } => "kvdirect",
            StrategyKind::KvDirect {
                checkpoint: CheckpointMode::PerLayer,
                ..
            } => "kvdirect-layer",
        }
    }

    fn eviction_policy(&self) -> Option<EvictionPolicy> {
        match *self {
            StrategyKind::WindowOnly { .. } => Some(EvictionPolicy::WindowOnly),
            StrategyKind::H2O { .. } => Some(EvictionPolicy::H2O),
            StrategyKind::StreamingLlm { sinks, .. } => {
                Some(EvictionPolicy::StreamingLlm { sinks })
            }
            StrategyKind::SnapKv { .. } => Some(EvictionPolicy::SnapKv),
            StrategyKind::Tova { .. } => Some(EvictionPolicy::Tova),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Param(format!("{self}: {msg}")));
        match *self {
            StrategyKind::Full | StrategyKind::KvDirect { .. } => Ok(()),
            StrategyKind::StreamingLlm { budget, sinks } if sinks == 0 || sinks >= budget => {
                bad(format!("sinks must be in 1..{budget}"))
            }
            StrategyKind::SnapKv { obs_window: 0, .. } => {
                bad("obs_window must be at least 1".into())
            }
            s if s.budget() == Some(0) => bad("budget must be at least 1".into()),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            StrategyKind::Full => f.write_str("full"),
            StrategyKind::StreamingLlm { budget, sinks } => write!(f, "streaming:{budget}:{sinks}"),
            StrategyKind::SnapKv { budget, obs_window } => {
                write!(f, "snapkv:{budget}:{obs_window}")
            }
            s => write!(f, "{}:{}", s.family(), s.budget().unwrap_or(0)),
        }
    }
}

/// Parses `full`, `window:B`, `h2o:B`, `streaming:B[:sinks]`,
/// `snapkv:B[:obs_window]`, `tova:B`, `kvdirect:B`, `kvdirect-layer:B`.
/// The budget may be omitted (left at 0) when a sweep supplies it.
impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.trim().split(':');
        let name = parts.next().unwrap_or_default().to_ascii_lowercase();
        let mut num = |what: &str, default: usize| -> Result<usize> {
            match parts.next() {
                None => Ok(default),
                Some(v) => v.parse().map_err(|_| {
                    Error::Param(format!("strategy `{s}`: {what} `{v}` is not a count"))
                }),
            }
        };
        let kind = match name.as_str() {
            "full" => StrategyKind::Full,
            "window" | "window-only" => StrategyKind::WindowOnly {
                budget: num("budget", 0)?,
            },
            "h2o" => StrategyKind::H2O {
                budget: num("budget", 0)?,
            },
            "streaming" | "streamingllm" => {
                let budget = num("budget", 0)?;
                StrategyKind::StreamingLlm {
                    budget,
                    sinks: num("sinks", DEFAULT_SINKS)?,
                }
            }
            "snapkv" => {
                let budget = num("budget", 0)?;
                StrategyKind::SnapKv {
                    budget,
                    obs_window: num("obs_window", DEFAULT_OBS_WINDOW)?,
                }
            }
            "tova" => StrategyKind::Tova {
                budget: num("budget", 0)?,
            },
            "kvdirect" | "kv-direct" => StrategyKind::KvDirect {
                budget: num("budget", 0)?,
                checkpoint: CheckpointMode::Replay,
            },
            "kvdirect-layer" => StrategyKind::KvDirect {
                budget: num("budget", 0)?,
                checkpoint: CheckpointMode::PerLayer,
            },
            other => return Err(Error::Param(format!("unknown strategy `{other}`"))),
        };
        if parts.next().is_some() {
            return Err(Error::Param(format!("strategy `{s}` has too many fields")));
        }
        Ok(kind)
    }
}

impl From<StrategyKind> for String {
    fn from(k: StrategyKind) -> Self {
        k.to_string()
    }
}

impl TryFrom<String> for StrategyKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone)]
struct Resident {
    entry: KvEntry,
    /// Residual entering this layer; kept by KV-Direct until eviction.
    residual: Option<Vec<f32>>,
    cumulative: f64,
    recent: VecDeque<f32>,
    latest: f32,
}

#[derive(Debug, Clone)]
enum Checkpoints {
    None,
    Shared(Vec<ResidualCheckpoint>),
    PerLayer(Vec<LayerCheckpoints>),
}

/// Running counters for one cache.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub evictions: usize,
    /// K/V entries rebuilt from checkpoints, summed over layers and steps.
    pub recomputed: usize,
}

/// Bytes the cache holds right now, at `bytes_per_elem` per scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MemoryUsage {
    pub kv_entries: usize,
    pub checkpoint_vectors: usize,
    pub bytes: u64,
}

#[derive(Debug, Clone)]
pub struct KvCache {
    kind: StrategyKind,
    layers: Vec<VecDeque<Resident>>,
    checkpoints: Checkpoints,
    next_position: usize,
    last_committed: Vec<Option<usize>>,
    replay: Option<Matrix>,
    stats: CacheStats,
}

impl KvCache {
    pub fn new(kind: StrategyKind, config: &ModelConfig) -> Result<Self> {
        kind.validate()?;
        let checkpoints = match kind {
            StrategyKind::KvDirect {
                checkpoint: CheckpointMode::Replay,
                ..
            } => Checkpoints::Shared(Vec::new()),
            StrategyKind::KvDirect {
                checkpoint: CheckpointMode::PerLayer,
                ..
            } => Checkpoints::PerLayer(
                (0..config.n_layers)
                    .map(|layer| LayerCheckpoints {
                        layer,
                        checkpoints: Vec::new(),
                    })
                    .collect(),
            ),
            _ => Checkpoints::None,
        };
        Ok(Self {
            kind,
            layers: vec![VecDeque::new(); config.n_layers],
            checkpoints,
            next_position: 0,
            last_committed: vec![None; config.n_layers],
            replay: None,
            stats: CacheStats::default(),
        })
    }

    pub fn kind(&self) -> StrategyKind {
        self.kind
    }

    pub fn next_position(&self) -> usize {
        self.next_position
    }

    pub fn stats(&self) -> CacheStats {
        self.stats
    }

    /// Only a full cache can take multi-token chunks; everything else
    /// evicts once per step.
    pub fn accepts_chunks(&self) -> bool {
        matches!(self.kind, StrategyKind::Full)
    }

    pub fn wants_attention(&self) -> bool {
        matches!(
            self.kind,
            StrategyKind::H2O { .. } | StrategyKind::SnapKv { .. } | StrategyKind::Tova { .. }
        )
    }

    pub fn resident_entries(&self, layer: usize) -> Vec<KvEntry> {
        self.layers[layer].iter().map(|r| r.entry.clone()).collect()
    }

    pub fn resident_positions(&self, layer: usize) -> Vec<usize> {
        self.layers[layer]
            .iter()
            .map(|r| r.entry.position)
            .collect()
    }

    pub fn checkpoint_count(&self) -> usize {
        match &self.checkpoints {
            Checkpoints::None => 0,
            Checkpoints::Shared(c) => c.len(),
            Checkpoints::PerLayer(c) => c.iter().map(|l| l.checkpoints.len()).sum(),
        }
    }

    /// Stored KV entries and checkpoint vectors, priced at
    /// `bytes_per_elem`. Residuals parked beside resident entries are not
    /// counted: they are the entries' own state until eviction.
    pub fn memory_usage(&self, config: &ModelConfig) -> MemoryUsage {
        let kv_entries: usize = self.layers.iter().map(VecDeque::len).sum();
        let checkpoint_vectors = self.checkpoint_count();
        let b = config.bytes_per_elem as u64;
        let bytes = kv_entries as u64 * 2 * config.kv_dim() as u64 * b
            + checkpoint_vectors as u64 * config.d_hidden as u64 * b;
        MemoryUsage {
            kv_entries,
            checkpoint_vectors,
            bytes,
        }
    }

    pub(crate) fn begin_step(&mut self, model: &Model) -> Result<()> {
        if let Checkpoints::Shared(c) = &self.checkpoints {
            if !c.is_empty() {
                let mut m = Matrix::zeros(c.len(), model.config().d_hidden);
                for (i, cp) in c.iter().enumerate() {
                    m.row_mut(i).copy_from_slice(&cp.residual);
                }
                self.replay = Some(m);
            }
        }
        Ok(())
    }

    /// K/V for every earlier position the strategy still has, ascending.
    pub fn context(&mut self, model: &Model, layer: usize) -> Result<Vec<KvEntry>> {
        let mut out = Vec::new();
        match &self.checkpoints {
            Checkpoints::None => {}
            Checkpoints::Shared(c) => {
                if let Some(replay) = self.replay.take() {
                    // The evicted tokens are always the oldest prefix, so
                    // they only ever attended to each other: running the
                    // layer over them alone regenerates their K/V and the
                    // residual entering the next layer.
                    debug_assert_eq!(c.first().map(|c| c.position), Some(0));
                    let step = model.layer_forward(layer, &replay, 0, &[], false)?;
                    self.stats.recomputed += step.entries.len();
                    out = step.entries;
                    if layer + 1 < model.config().n_layers {
                        self.replay = Some(step.residuals);
                    }
                }
            }
            Checkpoints::PerLayer(stores) => {
                let store = stores.get(layer).ok_or(Error::MissingResidual(layer))?;
                out = recompute_kv(model, store, layer, KeyPosition::Stored)?;
                self.stats.recomputed += out.len();
            }
        }
        out.extend(self.layers[layer].iter().map(|r| r.entry.clone()));
        Ok(out)
    }

    /// Appends the step's entries and applies the eviction rule.
    ///
    /// `inputs` are the residuals that entered `layer` for the new
    /// positions; `attention` is the per-query averaged attention over
    /// `context ++ new` (only used by score-based baselines).
    pub fn commit(
        &mut self,
        layer: usize,
        entries: Vec<KvEntry>,
        inputs: &Matrix,
        attention: &[Vec<f32>],
    ) -> Result<()> {
        if let (Some(last), Some(first)) = (self.last_committed[layer], entries.first()) {
            if first.position <= last {
                return Err(Error::PositionRegression {
                    layer,
                    got: first.position,
                    last,
                });
            }
        }
        if let Some(e) = entries.last() {
            self.last_committed[layer] = Some(e.position);
        }
        let obs_window = match self.kind {
            StrategyKind::SnapKv { obs_window, .. } => obs_window,
            _ => 1,
        };
        // Attention from a single-token step: index i < resident count is
        // resident i, the final weight is the new entry's own.
        if self.wants_attention() {
            if let [weights] = attention {
                let resident = &mut self.layers[layer];
                for (r, &w) in resident.iter_mut().zip(weights.iter()) {
                    r.record(w, obs_window);
                }
            }
        }
        let keep_residual = match self.checkpoints {
            Checkpoints::Shared(_) => layer == 0,
            Checkpoints::PerLayer(_) => true,
            Checkpoints::None => false,
        };
        let n_prior_scores = attention
            .first()
            .map_or(0, |a| a.len().saturating_sub(entries.len()));
        for (i, entry) in entries.into_iter().enumerate() {
            let mut r = Resident {
                entry,
                residual: keep_residual.then(|| inputs.row(i).to_vec()),
                cumulative: 0.0,
                recent: VecDeque::new(),
                latest: 0.0,
            };
            if self.wants_attention() {
                if let Some(w) = attention.get(i).and_then(|a| a.get(n_prior_scores + i)) {
                    r.record(*w, obs_window);
                }
            }
            self.layers[layer].push_back(r);
        }
        self.evict(layer)
    }

    fn evict(&mut self, layer: usize) -> Result<()> {
        let Some(budget) = self.kind.budget() else {
            return Ok(());
        };
        let resident = &mut self.layers[layer];
        if resident.len() <= budget {
            return Ok(());
        }
        if let StrategyKind::KvDirect { .. } = self.kind {
            while resident.len() > budget {
                let old = resident.pop_front().expect("non-empty");
                self.stats.evictions += 1;
                let residual = old.residual;
                match &mut self.checkpoints {
                    Checkpoints::Shared(c) => {
                        if layer == 0 {
                            let residual = residual.ok_or(Error::MissingResidual(0))?;
                            c.push(ResidualCheckpoint {
                                position: old.entry.position,
                                residual,
                            });
                        }
                    }
                    Checkpoints::PerLayer(stores) => {
                        let residual = residual.ok_or(Error::MissingResidual(layer))?;
                        stores[layer].checkpoints.push(ResidualCheckpoint {
                            position: old.entry.position,
                            residual,
                        });
                    }
                    Checkpoints::None => unreachable!("KV-Direct always has a checkpoint store"),
                }
            }
            return Ok(());
        }

        let policy = self.kind.eviction_policy().expect("lossy strategy");
        let positions: Vec<usize> = resident.iter().map(|r| r.entry.position).collect();
        let scores: Vec<f64> = resident
            .iter()
            .map(|r| match policy {
                EvictionPolicy::H2O => r.cumulative,
                EvictionPolicy::SnapKv => {
                    r.recent.iter().map(|&w| w as f64).sum::<f64>() / r.recent.len().max(1) as f64
                }
                EvictionPolicy::Tova => r.latest as f64,
                _ => 0.0,
            })
            .collect();
        let kept = baseline_evict(policy, &positions, &scores, budget)?;
        let before = resident.len();
        let mut k = kept.iter().peekable();
        resident.retain(|r| {
            if k.peek() == Some(&&r.entry.position) {
                k.next();
                true
            } else {
                false
            }
        });
        self.stats.evictions += before - resident.len();
        Ok(())
    }

    pub(crate) fn end_step(&mut self, n_tokens: usize) {
        self.replay = None;
        self.next_position += n_tokens;
    }
}

impl Resident {
    fn record(&mut self, w: f32, obs_window: usize) {
        self.cumulative += w as f64;
        self.latest = w;
        self.recent.push_back(w);
        while self.recent.len() > obs_window {
            self.recent.pop_front();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{byte_tokens, ModelConfig};

    fn kvd(budget: usize) -> StrategyKind {
        StrategyKind::KvDirect {
            budget,
            checkpoint: CheckpointMode::Replay,
        }
    }

    #[test]
    fn strategy_strings_round_trip() {
        for s in [
            StrategyKind::Full,
            StrategyKind::WindowOnly { budget: 8 },
            StrategyKind::H2O { budget: 4 },
            StrategyKind::StreamingLlm {
                budget: 4,
                sinks: 1,
            },
            StrategyKind::SnapKv {
                budget: 16,
                obs_window: 4,
            },
            StrategyKind::Tova { budget: 2 },
            kvd(0),
            StrategyKind::KvDirect {
                budget: 3,
                checkpoint: CheckpointMode::PerLayer,
            },
        ] {
            assert_eq!(s.to_string().parse::<StrategyKind>().unwrap(), s);
        }
        assert_eq!(
            "h2o".parse::<StrategyKind>().unwrap().with_budget(8),
            StrategyKind::H2O { budget: 8 }
        );
        assert!("lru:4".parse::<StrategyKind>().is_err());
        assert!("tova:4:5".parse::<StrategyKind>().is_err());
    }

    #[test]
    fn validation() {
        assert!(StrategyKind::H2O { budget: 0 }.validate().is_err());
        assert!(StrategyKind::StreamingLlm {
            budget: 4,
            sinks: 4
        }
        .validate()
        .is_err());
        assert!(kvd(0).validate().is_ok());
    }

    #[test]
    fn kvdirect_large_budget_behaves_as_full() {
        let model = Model::from_config(ModelConfig::toy()).unwrap();
        let tokens = byte_tokens(b"budget covers everything");
        let mut full = KvCache::new(StrategyKind::Full, model.config()).unwrap();
        let mut kv = KvCache::new(kvd(1000), model.config()).unwrap();
        let a = model.forward(&tokens, &mut full, false).unwrap();
        let b = model.forward(&tokens, &mut kv, false).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(kv.checkpoint_count(), 0);
        assert_eq!(kv.stats().recomputed, 0);
    }

    #[test]
    fn kvdirect_zero_budget_is_exact() {
        for mode in [CheckpointMode::Replay, CheckpointMode::PerLayer] {
            let model = Model::from_config(ModelConfig::toy_mixed()).unwrap();
            let prompt = byte_tokens(b"every token recomputed each step");
            let mut full = KvCache::new(StrategyKind::Full, model.config()).unwrap();
            let mut kv = KvCache::new(
                StrategyKind::KvDirect {
                    budget: 0,
                    checkpoint: mode,
                },
                model.config(),
            )
            .unwrap();
            let a = model.greedy_decode(&prompt, 20, &mut full).unwrap();
            let b = model.greedy_decode(&prompt, 20, &mut kv).unwrap();
            assert_eq!(a, b);
            assert_eq!(kv.resident_positions(0), Vec::<usize>::new());
        }
    }

    #[test]
    fn kvdirect_memory_matches_closed_form() {
        let model = Model::from_config(ModelConfig::toy()).unwrap();
        let cfg = model.config();
        let mut kv = KvCache::new(kvd(8), cfg).unwrap();
        let tokens = byte_tokens(b"thirty-two bytes of prompt text.");
        model.forward(&tokens, &mut kv, false).unwrap();
        let usage = kv.memory_usage(cfg);
        let report = memory_report(&cfg.into(), tokens.len(), &kvd(8)).unwrap();
        assert_eq!(usage.bytes, report.total_bytes);
        assert_eq!(usage.checkpoint_vectors, tokens.len() - 8);
    }

    #[test]
    fn window_only_keeps_last_b() {
        let model = Model::from_config(ModelConfig::toy()).unwrap();
        let mut c = KvCache::new(StrategyKind::WindowOnly { budget: 8 }, model.config()).unwrap();
        let tokens: Vec<u32> = (0..64).map(|i| (i * 7 % 251) as u32).collect();
        model.forward(&tokens, &mut c, false).unwrap();
        for layer in 0..4 {
            assert_eq!(c.resident_positions(layer), (56..64).collect::<Vec<_>>());
        }
        // The next step sees exactly B earlier entries.
        assert_eq!(c.context(&model, 0).unwrap().len(), 8);
    }

    #[test]
    fn score_based_baselines_stay_within_budget() {
        let model = Model::from_config(ModelConfig::toy()).unwrap();
        let tokens = byte_tokens(b"heavy hitters and their friends");
        for kind in [
            StrategyKind::H2O { budget: 5 },
            StrategyKind::SnapKv {
                budget: 5,
                obs_window: 3,
            },
            StrategyKind::Tova { budget: 5 },
            StrategyKind::StreamingLlm {
                budget: 5,
                sinks: 2,
            },
        ] {
            let mut c = KvCache::new(kind, model.config()).unwrap();
            model.forward(&tokens, &mut c, false).unwrap();
            for layer in 0..4 {
                let pos = c.resident_positions(layer);
                assert_eq!(pos.len(), 5, "{kind}");
                assert!(pos.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }

    #[test]
    fn commit_rejects_position_regression() {
        let model = Model::from_config(ModelConfig::toy()).unwrap();
        let mut c = KvCache::new(StrategyKind::Full, model.config()).unwrap();
        model.forward(&[1, 2, 3], &mut c, false).unwrap();
        let stale = c.resident_entries(0)[1].clone();
        let inputs = Matrix::zeros(1, 64);
        assert!(matches!(
            c.commit(0, vec![stale], &inputs, &[]),
            Err(Error::PositionRegression { .. })
        ));
    }
}
