//! Invertible network stages with hand-derived gradients.
//!
//! A stage is a sequence of additive coupling layers (with an optional
//! squeeze/unsqueeze pair) acting bijectively on the stacked `(x, s)` state,
//! each conditioned on the data-misfit gradient. Backpropagation walks the
//! layers in reverse and rebuilds each layer's input by inversion, so the
//! activation working set does not grow with depth.

mod conv;
mod coupling;
mod stage;
mod tensor;

use thiserror::Error;

pub use conv::{conv_backward, conv_forward, leaky_relu, leaky_relu_backward, ConvKernel, LEAKY_SLOPE};
pub use coupling::{coupling_forward, coupling_inverse, squeeze, unsqueeze, CouplingLayerParams, Parity, ResidualCache};
pub use stage::{
    init_params, stage_backward, stage_forward, stage_inverse, ActivationCacheStats, ArchSpec, InnState,
    Resample, StageBackward, StageOp, StageParams,
};
pub use tensor::{Real, TensorField};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("coupling split needs an even channel count, got {0}")]
    OddChannels(usize),
    #[error("squeeze needs even spatial extents, got {0:?}")]
    OddSpatial([usize; 3]),
    #[error("non-finite value in network tensor")]
    NonFinite,
    #[error("invalid architecture: {0}")]
    Arch(String),
}

pub type Result<T> = std::result::Result<T, InnError>;
