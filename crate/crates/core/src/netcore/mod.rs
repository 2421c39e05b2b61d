//! Homogeneous networks with sparse and shared weights: architecture maps, parameters,
//! datasets, evaluation and parameter gradients.

mod arch;
mod data;
mod eval;
mod params;

pub use arch::{
    dense_entries, diagonal_entries, patch_entries, Activation, ArchDoc, ArchSpec, Entry, LayerMap,
    NeuronLink,
};
pub use data::{Dataset, Example};
pub use eval::{
    activation_pattern, forward, gated_value_and_grad, grad, homogeneity_degree, homogeneity_residual,
    loss_and_grad, margins, materialize, min_margin, preactivations, value_and_grad, ActivationPattern,
    Gates, LossKind, ZERO_PREACTIVATION_TOL,
};
pub use params::ParamVec;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("parameter shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("input has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("activation pattern is only defined for ReLU networks")]
    NotApplicable,
}
