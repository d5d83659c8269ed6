//! Numerical core: a scalar-generic tensor engine with reverse-mode
//! differentiation, the network building blocks built on it, the wireless
//! channel model and the training objectives.
//!
//! Everything is generic over [`Real`] (`f32` or `f64`); the crate-root
//! aliases fix the scalar to `f64`, which the rest of the workspace uses.

pub mod autodiff;
pub mod channel;
pub mod losses;
pub mod nnblocks;
pub mod scalar;
pub mod selfcheck;

pub use autodiff::{AutodiffError, OpKind, Var};
pub use scalar::Real;

/// Dense tensor, defaulting to 64-bit scalars.
pub type Tensor<R = f64> = autodiff::Tensor<R>;
/// Gradient tape, defaulting to 64-bit scalars.
pub type Tape<R = f64> = autodiff::Tape<R>;

pub type Tensor64 = autodiff::Tensor<f64>;
pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type Tape32 = autodiff::Tape<f32>;
