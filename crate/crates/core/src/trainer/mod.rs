//! Optimization loop, schedule, corpus handling, checkpoints and path
//! restriction.

mod corpus;
mod optim;
mod restrict;
mod train;
mod trie;

pub use corpus::{synthetic_text, Corpus, EVAL_FRACTION};
pub use optim::{clip_global_norm, AdamW, Moments, Schedule};
pub use restrict::{identify_top_paths, restrict_to_paths, top_paths_of, TopPaths};
pub use train::{MetricsLog, StepStats, TrainConfig, Trainer, CHECKPOINT_KIND, METRICS_FORMAT, METRICS_VERSION};
pub use trie::PathTrie;
