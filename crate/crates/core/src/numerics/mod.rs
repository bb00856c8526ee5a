//! Dense tensors, a reverse-mode differentiation tape, seeded random
//! streams, and finite-difference oracles.

mod oracle;
mod params;
mod rng;
mod tape;
mod tensor;

#[cfg(test)]
mod tape_tests;

pub use oracle::{fd_gradient, fd_jacobian_logdet, gaussian_logp, gaussian_logp_per_sample, sample_gaussian, LN_2PI};
pub use params::{ParamId, ParamStore};
pub use rng::FlowRng;
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} elements")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("gradient requested for non-scalar output of shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("jacobian is singular (|det| = {det:e})")]
    SingularJacobian { det: f64 },
}
