//! Minimal deterministic differentiable-network core.
//!
//! Values live in [`Tensor`]s; a [`Graph`] records the operations of one
//! forward pass and replays them in reverse for gradients. Parameters are
//! owned by a [`ParamSet`] and updated with [`Adam`].

mod conv;
mod gradcheck;
mod graph;
mod params;
mod rng;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use graph::{Forward, Graph, Module, Var};
pub use params::{adam_step, xavier_uniform, Adam, Param, ParamSet};
pub use rng::SplitMix64;
pub use tensor::{LabelTensor, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u8, classes: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("parameter `{0}` is trainable but has no gradient")]
    MissingGrad(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
}
