use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    /// One router per layer.
    Independent,
    /// One router per block of `block_size` consecutive layers; every layer
    /// still makes its own decision.
    PathShared,
    /// One router per block, and the block's first decision is reused at
    /// every layer of the block.
    MonoShared,
    /// A single shared router plus a per-layer rank-`r` correction.
    LowRank,
    /// Per-layer cosine scoring in a low-dimensional normalized space with a
    /// learnable temperature.
    #[serde(rename = "xmoe")]
    XMoE,
    /// Per-layer routers left at their random initialization.
    RandomFrozen,
}

impl StrategyKind {
    pub fn short_name(self) -> &'static str {
        match self {
            StrategyKind::Independent => "indep",
            StrategyKind::PathShared => "path",
            StrategyKind::MonoShared => "mono",
            StrategyKind::LowRank => "lowrank",
            StrategyKind::XMoE => "xmoe",
            StrategyKind::RandomFrozen => "rand",
        }
    }

    pub fn from_short_name(s: &str) -> Option<Self> {
        Some(match s {
            "indep" => StrategyKind::Independent,
            "path" => StrategyKind::PathShared,
            "mono" => StrategyKind::MonoShared,
            "lowrank" => StrategyKind::LowRank,
            "xmoe" => StrategyKind::XMoE,
            "rand" => StrategyKind::RandomFrozen,
            _ => return None,
        })
    }
}

/// How router scores are produced from a token representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scoring {
    /// `W_slot x`
    Linear,
    /// `W_shared x + U_l V_l x`
    LowRank,
    /// `cos(P_slot x, E_slot) / tau_slot`
    Cosine,
}

fn default_block() -> usize {
    1
}

fn default_proj() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingStrategy {
    pub kind: StrategyKind,
    #[serde(default = "default_block")]
    pub block_size: usize,
    #[serde(default)]
    pub rank: usize,
    #[serde(default = "default_proj")]
    pub proj_dim: usize,
    /// Score with the cosine router inside each shared block.
    #[serde(default)]
    pub compose_xmoe: bool,
}

impl Default for RoutingStrategy {
    fn default() -> Self {
        Self::independent()
    }
}

impl RoutingStrategy {
    fn of(kind: StrategyKind) -> Self {
        Self { kind, block_size: 1, rank: 0, proj_dim: default_proj(), compose_xmoe: false }
    }

    pub fn independent() -> Self {
        Self::of(StrategyKind::Independent)
    }

    pub fn path_shared(block_size: usize) -> Self {
        Self { block_size, ..Self::of(StrategyKind::PathShared) }
    }

    pub fn mono_shared(block_size: usize) -> Self {
        Self { block_size, ..Self::of(StrategyKind::MonoShared) }
    }

    pub fn low_rank(rank: usize) -> Self {
        Self { rank, ..Self::of(StrategyKind::LowRank) }
    }

    pub fn xmoe(proj_dim: usize) -> Self {
        Self { proj_dim, ..Self::of(StrategyKind::XMoE) }
    }

    pub fn random_frozen() -> Self {
        Self::of(StrategyKind::RandomFrozen)
    }

    /// Block-shared routers scored with the cosine router.
    pub fn path_xmoe(block_size: usize, proj_dim: usize) -> Self {
        Self { block_size, proj_dim, compose_xmoe: true, ..Self::of(StrategyKind::PathShared) }
    }

    pub fn validate(&self, n_layers: usize, d_model: usize) -> Result<()> {
        match self.kind {
            StrategyKind::PathShared | StrategyKind::MonoShared => {
                if self.block_size == 0 || self.block_size > n_layers.max(1) {
                    return Err(Error::config(
                        "strategy.block_size",
                        format!("must be in [1, {}], got {}", n_layers.max(1), self.block_size),
                    ));
                }
            }
            StrategyKind::LowRank => {
                if self.rank >= d_model {
                    return Err(Error::config("strategy.rank", format!("must be < d_model {d_model}, got {}", self.rank)));
                }
            }
            _ => {}
        }
        if self.compose_xmoe && self.kind != StrategyKind::PathShared {
            return Err(Error::config("strategy.compose_xmoe", "only valid with the path-shared strategy"));
        }
        if self.scoring() == Scoring::Cosine && self.proj_dim == 0 {
            return Err(Error::config("strategy.proj_dim", "must be positive"));
        }
        Ok(())
    }

    pub fn scoring(&self) -> Scoring {
        match self.kind {
            StrategyKind::XMoE => Scoring::Cosine,
            StrategyKind::PathShared if self.compose_xmoe => Scoring::Cosine,
            StrategyKind::LowRank => Scoring::LowRank,
            _ => Scoring::Linear,
        }
    }

    fn shares_blocks(&self) -> bool {
        matches!(self.kind, StrategyKind::PathShared | StrategyKind::MonoShared)
    }

    /// Number of router slots for `n_layers` layers.
    pub fn n_slots(&self, n_layers: usize) -> usize {
        match self.kind {
            _ if self.shares_blocks() => n_layers.div_ceil(self.block_size),
            StrategyKind::LowRank => 1,
            _ => n_layers,
        }
    }

    /// Router slot used at zero-based `layer`: layer `l` of a path-shared
    /// stack uses block `l / B`, i.e. block `ceil(l'/B)` in one-based terms.
    pub fn slot_of(&self, layer: usize) -> usize {
        match self.kind {
            _ if self.shares_blocks() => layer / self.block_size,
            StrategyKind::LowRank => 0,
            _ => layer,
        }
    }

    /// Layer whose decision is used at `layer`; differs from `layer` only for
    /// decision sharing.
    pub fn decision_layer(&self, layer: usize) -> usize {
        match self.kind {
            StrategyKind::MonoShared => layer - layer % self.block_size,
            _ => layer,
        }
    }

    pub fn frozen(&self) -> bool {
        self.kind == StrategyKind::RandomFrozen
    }

    /// Compact label such as `path-b4` or `lowrank-r8`.
    pub fn label(&self) -> String {
        let base = self.kind.short_name();
        match self.kind {
            StrategyKind::PathShared if self.compose_xmoe => format!("path-b{}-xmoe", self.block_size),
            StrategyKind::PathShared | StrategyKind::MonoShared => format!("{base}-b{}", self.block_size),
            StrategyKind::LowRank => format!("{base}-r{}", self.rank),
            _ => base.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_slotting_matches_ceiling_rule() {
        // one-based layers 5 and 8 share a router at B=4, L=24; 4 and 5 do not
        let s = RoutingStrategy::path_shared(4);
        s.validate(24, 64).unwrap();
        assert_eq!(s.slot_of(5 - 1), s.slot_of(8 - 1));
        assert_ne!(s.slot_of(4 - 1), s.slot_of(5 - 1));
        assert_eq!(s.n_slots(24), 6);
        assert_eq!(RoutingStrategy::path_shared(5).n_slots(24), 5);
    }

    #[test]
    fn block_size_bounds() {
        assert!(RoutingStrategy::path_shared(0).validate(8, 16).is_err());
        assert!(RoutingStrategy::path_shared(9).validate(8, 16).is_err());
        assert!(RoutingStrategy::path_shared(8).validate(8, 16).is_ok());
        assert!(RoutingStrategy::low_rank(16).validate(8, 16).is_err());
        assert!(RoutingStrategy::low_rank(15).validate(8, 16).is_ok());
    }

    #[test]
    fn mono_decision_layers() {
        let s = RoutingStrategy::mono_shared(3);
        let heads: Vec<usize> = (0..8).map(|l| s.decision_layer(l)).collect();
        assert_eq!(heads, vec![0, 0, 0, 3, 3, 3, 6, 6]);
    }

    #[test]
    fn short_names_round_trip() {
        for k in [
            StrategyKind::Independent,
            StrategyKind::PathShared,
            StrategyKind::MonoShared,
            StrategyKind::LowRank,
            StrategyKind::XMoE,
            StrategyKind::RandomFrozen,
        ] {
            assert_eq!(StrategyKind::from_short_name(k.short_name()), Some(k));
        }
    }

    #[test]
    fn config_spelling() {
        let names: Vec<String> = [
            StrategyKind::Independent,
            StrategyKind::PathShared,
            StrategyKind::MonoShared,
            StrategyKind::LowRank,
            StrategyKind::XMoE,
            StrategyKind::RandomFrozen,
        ]
        .iter()
        .map(|k| serde_json::to_string(k).unwrap())
        .collect();
        assert_eq!(names, ["\"independent\"", "\"path_shared\"", "\"mono_shared\"", "\"low_rank\"", "\"xmoe\"", "\"random_frozen\""]);
        let s: RoutingStrategy = serde_json::from_str(r#"{"kind": "path_shared", "block_size": 4}"#).unwrap();
        assert_eq!(s, RoutingStrategy::path_shared(4));
    }
}
