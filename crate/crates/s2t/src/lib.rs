//! Speech-to-text semantic link built on `ross-core`.

pub mod data;
pub mod eval;
pub mod txmodels;
pub mod pipeline;
pub mod seeds;
pub mod selfcheck;
