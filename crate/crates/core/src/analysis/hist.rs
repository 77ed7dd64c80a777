use std::collections::HashMap;

use serde::Serialize;

use crate::error::{Error, Result};

use super::info::entropy_bits;
use super::trace::RoutingTrace;

/// Counts of top-1 expert paths, most frequent first (ties by path order).
#[derive(Clone, Debug, PartialEq)]
pub struct PathHistogram {
    counts: Vec<(Vec<usize>, usize)>,
    total: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RoutingEntropy {
    pub bits: f64,
    /// `2^bits`, the effective number of equally likely paths.
    pub effective: f64,
    pub unique: usize,
}

impl PathHistogram {
    pub fn from_paths<I: IntoIterator<Item = Vec<usize>>>(paths: I) -> Self {
        let mut map: HashMap<Vec<usize>, usize> = HashMap::new();
        let mut total = 0;
        for p in paths {
            *map.entry(p).or_default() += 1;
            total += 1;
        }
        let mut counts: Vec<_> = map.into_iter().collect();
        counts.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self { counts, total }
    }

    pub fn from_trace(trace: &RoutingTrace) -> Self {
        Self::from_paths((0..trace.len()).map(|t| trace.path(t)))
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn unique(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    /// `(path, count)` pairs, most frequent first.
    pub fn entries(&self) -> &[(Vec<usize>, usize)] {
        &self.counts
    }

    pub fn count(&self, path: &[usize]) -> usize {
        self.counts.iter().find(|(p, _)| p == path).map_or(0, |e| e.1)
    }

    pub fn frequencies(&self) -> Vec<f64> {
        self.counts.iter().map(|(_, c)| *c as f64 / self.total as f64).collect()
    }

    /// The `k` most frequent paths (fewer if fewer were observed).
    pub fn top(&self, k: usize) -> Vec<Vec<usize>> {
        self.counts.iter().take(k).map(|(p, _)| p.clone()).collect()
    }

    /// Plug-in Shannon entropy of the path distribution in bits.
    pub fn routing_entropy(&self) -> Result<RoutingEntropy> {
        if self.is_empty() {
            return Err(Error::Data("entropy of an empty path histogram".into()));
        }
        let bits = entropy_bits(self.counts.iter().map(|e| e.1));
        Ok(RoutingEntropy { bits, effective: bits.exp2(), unique: self.unique() })
    }

    /// Fraction of tokens covered by the `k` most frequent paths.
    pub fn cumulative_coverage(&self, k: usize) -> Result<f64> {
        if k == 0 {
            return Err(Error::invalid("coverage needs K >= 1"));
        }
        if self.is_empty() {
            return Err(Error::Data("coverage of an empty path histogram".into()));
        }
        let covered: usize = self.counts.iter().take(k).map(|e| e.1).sum();
        Ok(covered as f64 / self.total as f64)
    }
}
