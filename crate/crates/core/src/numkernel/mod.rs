//! Minimal tensor and reverse-mode autodiff kernel: the numeric layer the
//! encoder trains on. Everything is `f64` and deterministic.

mod adam;
mod gradcheck;
mod rng;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport, LossFunction, TensorCheck};
pub use rng::{derive_seed, Rng};
pub use tape::{BackwardRule, Gradients, Tape, Var, NAN_SCAN_ENV};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum KernelError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} expects a rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("shape {shape:?} cannot hold {len} elements")]
    Size { shape: Vec<usize>, len: usize },
    #[error("invalid axis {axis} for shape {shape:?}")]
    Axis { axis: usize, shape: Vec<usize> },
    #[error("target id {id} out of range for {classes} classes")]
    Target { id: usize, classes: usize },
    #[error("row index {id} out of range for table with {rows} rows")]
    Index { id: usize, rows: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("backward called on an empty tape")]
    EmptyTape,
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("parameter {0} has no gradient")]
    MissingGradient(usize),
    #[error("optimizer state does not match parameter {index}: {expected:?} vs {found:?}")]
    StateMismatch {
        index: usize,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

#[cfg(test)]
mod tests;
