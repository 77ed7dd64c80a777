use crate::analysis::{record_trace, PathHistogram};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model};
use crate::router::StrategyKind;
use crate::tensor::Real;

use super::train::Trainer;
use super::trie::PathTrie;

/// The `K` most frequent top-1 paths of a model on some data.
#[derive(Clone, Debug)]
pub struct TopPaths {
    pub trie: PathTrie,
    pub paths: Vec<Vec<usize>>,
    pub requested: usize,
    /// Distinct paths observed in the data.
    pub observed: usize,
    /// Fraction of traced tokens that follow one of `paths`.
    pub coverage: f64,
}

impl TopPaths {
    /// Fewer distinct paths were observed than requested; all of them were
    /// kept.
    pub fn short(&self) -> bool {
        self.observed < self.requested
    }
}

/// Traces `data` and keeps the `k` most frequent paths.
pub fn identify_top_paths<T: Real>(model: &Model<T>, data: &[usize], rows: usize, k: usize) -> Result<TopPaths> {
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    let trace = record_trace(model, data, rows, ForwardOptions::default())?;
    Ok(top_paths_of(&PathHistogram::from_trace(&trace), k, model.config().n_layers, model.config().n_experts)?)
}

pub fn top_paths_of(hist: &PathHistogram, k: usize, n_layers: usize, n_experts: usize) -> Result<TopPaths> {
    let paths = hist.top(k);
    let trie = PathTrie::new(&paths, n_layers, n_experts)?;
    Ok(TopPaths { trie, coverage: hist.cumulative_coverage(k)?, paths, requested: k, observed: hist.unique() })
}

/// Restricts a trainer's routing to `trie` from its next step on.
pub fn restrict_to_paths(trainer: &mut Trainer, trie: PathTrie) -> Result<()> {
    let c = trainer.model.config();
    if trie.depth() != c.n_layers || trie.n_experts() != c.n_experts {
        return Err(Error::invalid(format!(
            "trie over {} layers x {} experts does not fit a {}-layer, {}-expert model",
            trie.depth(),
            trie.n_experts(),
            c.n_layers,
            c.n_experts
        )));
    }
    if c.strategy.kind == StrategyKind::MonoShared && c.strategy.block_size > 1 {
        return Err(Error::invalid("path restriction is undefined when decisions are shared within blocks"));
    }
    trainer.restrict = Some(trie);
    Ok(())
}
