//! Expert-path statistics over routing traces.

mod align;
mod category;
mod consistency;
mod hist;
mod info;
mod report;
mod robust;
mod trace;

pub use align::{align_experts, best_permutation, hungarian, AlignmentMap};
pub use category::{segment, token_units, Categories, OTHER};
pub use consistency::{adjacent_agreement, path_consistency, run_lengths, sustained_engagement, token_entropy_profile};
pub use hist::{PathHistogram, RoutingEntropy};
pub use info::{adjacent_mi, conditional_entropy, entropy_bits, markov_entropy, mi_from_counts, mi_from_joint, pair_counts};
pub use report::{category_summary, mean_concentration, path_token_report, CategoryRow, PathReport};
pub use robust::{perturb_against, perturb_and_eval, random_dispatch, Perturbation};
pub use trace::{record_trace, RoutingTrace, TraceRecord, TRACE_FORMAT, TRACE_VERSION};
