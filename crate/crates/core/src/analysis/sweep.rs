//! Strategy × budget grid scored against the full-cache run.

use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::{compare_generations, Agreement};
use crate::cache::{KvCache, StrategyKind};
use crate::error::{Error, Result};
use crate::model::{Generation, Model};

pub const SWEEP_BUDGETS: [usize; 5] = [4, 8, 16, 32, 64];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub strategy: String,
    pub family: String,
    pub budget: usize,
    pub match_fraction: f64,
    pub mean_kl: f64,
    pub max_kl: f64,
    pub matched: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub budgets: Vec<usize>,
    pub prompts: usize,
    pub n_new: usize,
    /// Row-major over `(strategy, budget)` in the order requested.
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    pub fn family<'a>(&'a self, family: &'a str) -> impl Iterator<Item = &'a SweepCell> {
        self.cells.iter().filter(move |c| c.family == family)
    }

    pub fn cell(&self, family: &str, budget: usize) -> Option<&SweepCell> {
        self.cells
            .iter()
            .find(|c| c.family == family && c.budget == budget)
    }
}

/// Runs every strategy family at every budget on every prompt.
///
/// `strategies` supply the family and its non-budget parameters; the budget
/// is replaced from `budgets`. Cells run in parallel, each with private
/// caches, and come back in input order.
pub fn budget_sweep(
    model: &Model,
    prompts: &[Vec<u32>],
    strategies: &[StrategyKind],
    budgets: &[usize],
    n_new: usize,
) -> Result<SweepResult> {
    if prompts.is_empty() || strategies.is_empty() || budgets.is_empty() {
        return Err(Error::Empty("sweep grid"));
    }
    let references: Vec<Generation> = prompts
        .par_iter()
        .map(|p| {
            let mut cache = KvCache::new(StrategyKind::Full, model.config())?;
            model.greedy_decode(p, n_new, &mut cache)
        })
        .collect::<Result<_>>()?;

    let grid: Vec<(StrategyKind, usize)> = strategies
        .iter()
        .flat_map(|s| budgets.iter().map(move |&b| (s.with_budget(b), b)))
        .collect();
    for (kind, _) in &grid {
        kind.validate()?;
    }
    let cells = grid
        .par_iter()
        .map(|&(kind, budget)| {
            let mut parts = Vec::with_capacity(prompts.len());
            for (prompt, reference) in prompts.iter().zip(&references) {
                let mut cache = KvCache::new(kind, model.config())?;
                let generated = model.greedy_decode(prompt, n_new, &mut cache)?;
                parts.push(compare_generations(&generated, reference)?);
            }
            let a = Agreement::pooled(&parts);
            Ok(SweepCell {
                strategy: kind.to_string(),
                family: kind.family().to_string(),
                budget,
                match_fraction: a.match_fraction(),
                mean_kl: a.mean_kl,
                max_kl: a.max_kl,
                matched: a.matched,
                total: a.total,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult {
        budgets: budgets.to_vec(),
        prompts: prompts.len(),
        n_new,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::CheckpointMode;
    use crate::model::{byte_tokens, ModelConfig};

    #[test]
    fn full_and_kvdirect_rows_are_exact() {
        let m = Model::from_config(ModelConfig::toy()).unwrap();
        let prompts = vec![
            byte_tokens(b"a short sweep prompt"),
            byte_tokens(b"and another one here"),
        ];
        let strategies = [
            StrategyKind::Full,
            StrategyKind::KvDirect {
                budget: 0,
                checkpoint: CheckpointMode::Replay,
            },
            StrategyKind::WindowOnly { budget: 0 },
        ];
        let r = budget_sweep(&m, &prompts, &strategies, &[2, 6], 8).unwrap();
        assert_eq!(r.cells.len(), 6);
        for c in r.family("full").chain(r.family("kvdirect")) {
            assert_eq!(c.match_fraction, 1.0, "{}", c.strategy);
            assert_eq!(c.max_kl, 0.0);
        }
        let w = r.cell("window", 2).unwrap();
        assert!(w.match_fraction <= 1.0 && w.mean_kl >= 0.0);
        assert_eq!(w.total, 16);
    }

    #[test]
    fn empty_grid_rejected() {
        let m = Model::from_config(ModelConfig::toy()).unwrap();
        assert!(budget_sweep(&m, &[], &[StrategyKind::Full], &[4], 2).is_err());
    }
}
