//! Minimal reverse-mode autodiff over dense 2-D tensors.
//!
//! Training precision is f32 and verification precision is f64; the whole op
//! set is generic over [`Scalar`]. Graphs are built on a short-lived
//! [`Tape`], gradients flow backward through closure-registered derivatives,
//! and every op carries a central finite-difference check in [`check`].

pub mod check;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use ops::{concat_cols, concat_rows, matmul_value, softmax_rows_plain, Reduction};
pub use optim::{AdamConfig, OptimState};
pub use params::{Binder, GradAccum, Init, ParamStore};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Shape, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("data length {got} does not match shape ({expected} elements)")]
    DataLength { expected: usize, got: usize },
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("invalid argument to {op}: {msg}")]
    InvalidArg { op: &'static str, msg: String },
    #[error("expected a 1x1 tensor, got {shape}")]
    NotScalar { shape: Shape },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("index {index} out of bounds in {op} (limit {limit})")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("unknown parameter {0}")]
    UnknownParam(String),
}
