//! Fairness-aware negative sampling for implicit-feedback recommenders.
//!
//! Item groups come from a sensitive item attribute. Training alternates BPR
//! updates under a group-level negative sampling distribution with momentum
//! updates of that distribution, driven by per-group losses.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod fairctl;
pub mod metrics;
pub mod samplers;
pub mod synth;
pub mod trainer;

pub use backbone::{AdamConfig, AdamState, BackboneKind, EmbeddingModel, Embeddings, Triple};
pub use dataset::{DataSplit, GroupMap, Interaction, InteractionTable};
pub use error::{Error, Result};
pub use fairctl::{group_gradients, momentum_update, project_simplex, MomentumBank};
pub use metrics::{evaluate, GroupAggregation, MetricReport};
pub use samplers::{GroupDistribution, NegativeSampler, SamplerConfig, Strategy};
pub use trainer::{bilevel_train, TrainConfig, TrainOutcome};
