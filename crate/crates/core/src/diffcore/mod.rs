//! Minimal reverse-mode autodiff over dense f64 tensors, plus the optimizer
//! and checkpoint container.
//!
//! Everything is 64-bit and single-threaded per graph; determinism outranks
//! speed here. Parallel callers evaluate disjoint graphs.

mod adam;
pub mod checkpoint;
mod gradcheck;
mod graph;
mod kernels;
mod params;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{
    gradient_check, gradient_check_directional, gradient_check_trials, relative_error,
};
pub use graph::{CellWindow, Graph, NodeId};
pub use params::ParamSet;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("shape mismatch at {node}: {msg}")]
    ShapeMismatch { node: String, msg: String },
    #[error("non-finite value produced at {node}")]
    NonFinite { node: String },
    #[error("loss node must be scalar, got shape {shape:?}")]
    LossNotScalar { shape: Vec<usize> },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGrad { name: String },
    #[error("unknown parameter {name}")]
    UnknownParam { name: String },
}
