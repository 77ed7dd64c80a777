use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::router::RoutingStrategy;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positions {
    #[default]
    Learned,
    Rotary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    #[serde(default)]
    pub strategy: RoutingStrategy,
    /// Load-balancing weight; zero disables the auxiliary term.
    #[serde(default)]
    pub alpha: f64,
    #[serde(default)]
    pub positions: Positions,
    /// Rescale the selected gates to sum to one.
    #[serde(default)]
    pub renormalize_gates: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 8,
            n_experts: 8,
            top_k: 2,
            d_model: 128,
            n_heads: 4,
            d_ffn: 128,
            vocab_size: 256,
            seq_len: 128,
            strategy: RoutingStrategy::independent(),
            alpha: 0.0,
            positions: Positions::Learned,
            renormalize_gates: false,
        }
    }
}

impl ModelConfig {
    /// Checks cross-field constraints. Zero layers is accepted as a debug
    /// configuration.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.n_experts", self.n_experts),
            ("model.top_k", self.top_k),
            ("model.d_model", self.d_model),
            ("model.n_heads", self.n_heads),
            ("model.d_ffn", self.d_ffn),
            ("model.vocab_size", self.vocab_size),
            ("model.seq_len", self.seq_len),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.top_k > self.n_experts {
            return Err(Error::config("model.top_k", format!("{} exceeds n_experts {}", self.top_k, self.n_experts)));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config("model.n_heads", format!("{} does not divide d_model {}", self.n_heads, self.d_model)));
        }
        if self.positions == Positions::Rotary && (self.d_model / self.n_heads) % 2 != 0 {
            return Err(Error::config("model.positions", "rotary positions need an even head dimension"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("model.alpha", format!("must be a finite non-negative number, got {}", self.alpha)));
        }
        if self.n_layers > 0 {
            self.strategy.validate(self.n_layers, self.d_model)?;
        }
        Ok(())
    }
}
