//! Residual-stream authority auditing.
//!
//! Decomposes context-induced perturbations of a model's final residual
//! state into answer-predictive and null-space parts, measures how much
//! decision authority each context source exerts, and applies targeted
//! interventions at the answer position.
//!
//! - [`geometry`]: effective unembedding, tangent projection, answer subspace
//! - [`authority`]: forces, AAI, joint-margin prediction, trust metrics
//! - [`interventions`]: ablation, injection, layer patching, GAC
//! - [`stats`]: t, Wilcoxon, Pearson and binomial tests
//! - [`refmodel`]: synthetic reference model with planted ground truth
//! - [`dumpio`]: AAUD activation dumps and JSON manifests
//! - [`audit`]: batch runners producing reports

pub mod audit;
pub mod authority;
pub mod dumpio;
pub mod error;
pub mod geometry;
pub mod interventions;
pub mod linalg;
pub mod refmodel;
pub mod stats;

pub use authority::{ByCondition, Condition, ConflictRecord};
pub use error::{AuditError, Result};
pub use geometry::{
    AnswerSubspace, EffectiveUnembedding, PerturbationDecomposition, ResidualState,
};
