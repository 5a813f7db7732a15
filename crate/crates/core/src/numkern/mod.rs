//! Dense numeric kernels, reverse-mode differentiation and AdamW.

mod adamw;
mod gradcheck;
mod graph;
pub mod nn;
mod real;
mod rng;
pub(crate) mod tensor;

use thiserror::Error;

pub use adamw::{AdamW, AdamWConfig};
pub use gradcheck::{grad_check, grad_check_with_params, GradCheckReport};
pub use graph::{gelu, AttnShape, Gradients, Graph, ParamId, ParamStore, Parameter, Var};
pub use real::Real;
pub use rng::{derive_seed, Prng};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("{op}: dimension mismatch ({detail})")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("softmax row {row} has no unmasked entry")]
    DegenerateMask { row: usize },
    #[error("pooling segment {segment} has no valid frame")]
    EmptySegment { segment: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}
