//! Layers, parameter handling and the optimiser.
//!
//! A layer value (for example [`Dense`]) is a pure description: its name
//! prefix, widths and activation. Parameters live in a [`ParamStore`] and are
//! attached to a tape through [`Bindings`] before each forward pass, so one
//! description can run against trainable, frozen or perturbed weights.
//!
//! Parameter names are `<layer name>.<slot>`, e.g. `enc.ff.0.w`.

mod adam;
mod attention;
mod check;
mod layers;
mod params;

pub use adam::{AdamConfig, AdamState};
pub use attention::{causal_mask, DecoderBlock, MultiHeadAttention, TransformerBlock};
pub use check::grad_check_params;
pub use layers::{positional_encoding, Activation, Conv1dLayer, Conv2dLayer, Dense, Embedding, Norm};
pub use params::{
    init_params, Bindings, GradStore, Init, ParamDecl, ParamStore, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use thiserror::Error;

use crate::autodiff::AutodiffError;

/// Hyperparameters of one layer and the parameters it needs.
pub trait LayerSpec {
    fn name(&self) -> &str;
    fn decls(&self) -> Vec<ParamDecl>;
}

/// Parameter declarations of several layers, in order.
pub fn collect_decls(layers: &[&dyn LayerSpec]) -> Vec<ParamDecl> {
    layers.iter().flat_map(|l| l.decls()).collect()
}

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("duplicate parameter {0}")]
    DuplicateParam(String),
    #[error("no gradient for parameter {0}")]
    MissingGrad(String),
    #[error("{layer}: expected width {expected}, got {got}")]
    Width { layer: String, expected: usize, got: usize },
    #[error("{layer}: {msg}")]
    Spec { layer: String, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl NnError {
    pub(crate) fn spec(layer: &str, msg: impl Into<String>) -> Self {
        NnError::Spec { layer: layer.to_string(), msg: msg.into() }
    }
}

pub(crate) fn join(prefix: &str, slot: &str) -> String {
    format!("{prefix}.{slot}")
}
