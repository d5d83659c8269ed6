//! Dense tensors with a reverse-mode gradient tape.
//!
//! Every network in the workspace is expressed as a sequence of primitive ops
//! recorded on a [`Tape`]. Calling [`Tape::backward`] on a scalar loss walks
//! the record in exact reverse and populates gradients for every trainable
//! leaf. [`grad_check`] compares those gradients to central differences.
//!
//! Broadcasting is limited to scalar-with-tensor; use [`Tape::expand`] to
//! repeat a tensor along a new leading axis. `gelu` uses the tanh
//! approximation `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`. Convolutions
//! use zero "same" padding with an explicit stride: the output extent is
//! `ceil(n / stride)` and any odd leftover pad goes to the trailing edge.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_coords, relative_error, CoordCheck, GradCheckReport};
pub use tape::{OpAttrs, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tensor::split_axis;

use std::fmt;

use thiserror::Error;

/// Primitive op kinds recorded on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Matmul,
    Add,
    Mul,
    Sub,
    Div,
    Conv1d,
    Conv2d,
    LayerNorm,
    Softmax,
    Log,
    Exp,
    Gelu,
    Relu,
    Sigmoid,
    Gather,
    Concat,
    Slice,
    Transpose,
    Mean,
    Sum,
    Square,
    MaskedFill,
    Scale,
    AddScalar,
    Expand,
    Reshape,
    Select,
    LogClamped,
}

impl OpKind {
    /// Every kind, in declaration order.
    pub const ALL: [OpKind; 28] = [
        OpKind::Matmul,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Sub,
        OpKind::Div,
        OpKind::Conv1d,
        OpKind::Conv2d,
        OpKind::LayerNorm,
        OpKind::Softmax,
        OpKind::Log,
        OpKind::Exp,
        OpKind::Gelu,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Gather,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Transpose,
        OpKind::Mean,
        OpKind::Sum,
        OpKind::Square,
        OpKind::MaskedFill,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Expand,
        OpKind::Reshape,
        OpKind::Select,
        OpKind::LogClamped,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Matmul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Sub => "sub",
            OpKind::Div => "div",
            OpKind::Conv1d => "conv1d",
            OpKind::Conv2d => "conv2d",
            OpKind::LayerNorm => "layernorm",
            OpKind::Softmax => "softmax",
            OpKind::Log => "log",
            OpKind::Exp => "exp",
            OpKind::Gelu => "gelu",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Gather => "gather",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Transpose => "transpose",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::Square => "square",
            OpKind::MaskedFill => "masked_fill",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Expand => "expand",
            OpKind::Reshape => "reshape",
            OpKind::Select => "select",
            OpKind::LogClamped => "log_clamped",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: OpKind, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: OpKind },
    #[error("{op}: {msg}")]
    Invalid { op: OpKind, msg: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tensor of shape {shape:?} cannot hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
}

impl AutodiffError {
    pub(crate) fn invalid(op: OpKind, msg: impl Into<String>) -> Self {
        AutodiffError::Invalid { op, msg: msg.into() }
    }

    pub(crate) fn mismatch(op: OpKind, lhs: &[usize], rhs: &[usize]) -> Self {
        AutodiffError::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
    }
}
