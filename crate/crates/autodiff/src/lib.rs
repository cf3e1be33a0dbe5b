//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! Tensors are row-major, channels-last (`H×W×C` for feature maps). A [`Tape`]
//! records every operation of one forward pass; [`Tape::backward`] replays it in
//! reverse and accumulates gradients for every input that requires them.
//!
//! The engine is generic over [`Real`] so the same code runs in 32-bit for
//! training and in 64-bit for finite-difference gradient checks.

mod adam;
mod blob;
mod error;
mod gradcheck;
pub mod kernels;
mod real;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use blob::{decode_f32_le, encode_f32_le};
pub use error::TensorError;
pub use gradcheck::{grad_check, primitive_suite, GradCheckOptions, GradCheckReport};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
