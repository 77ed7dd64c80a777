//! Routers, top-k selection, sparse expert combination and the
//! load-balancing term.

mod balance;
mod bank;
mod combine;
mod decision;
mod strategy;

pub use balance::{assignment_fractions, balance_term, layer_balance_loss, load_balance_loss};
pub use bank::{BoundRouter, RouterBank, ROUTER_INIT_STD, TAU_FLOOR, TAU_INIT};
pub use combine::{combine_experts, moe_combine, CombineOptions, Selection};
pub use decision::{mono_reuse, top_k_select, RoutingDecision};
pub(crate) use decision::{top_k_constrained, top_k_into};
pub use strategy::{RoutingStrategy, Scoring, StrategyKind};
