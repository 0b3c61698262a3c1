//! Adapting a private model through a black-box source model.
//!
//! A source segmentation network is served behind an [`oracle`] that exposes
//! forward logits and, optionally, input gradients (vector-Jacobian products)
//! without ever revealing its parameters. The [`trainer`] pipelines learn a
//! residual input adapter and a private target network by alternately freezing
//! one and training the other, and fall back to a locally distilled simulator
//! when the oracle refuses gradients.

pub mod eval;
pub mod experiment;
pub mod models;
pub mod netcore;
pub mod oracle;
pub mod taskgen;
pub mod trainer;

pub use models::{AdapterSpec, ArchSpec, Network, SegArch, SegNetSpec};
pub use netcore::{LabelTensor, Module, Tensor};
