//! Tensors, the fixed EEGNet-style network, batch-norm regimes, manual
//! backpropagation and optimizers.

mod batchnorm;
pub mod checkpoint;
mod conv;
mod layers;
mod network;
mod optim;
mod real;
mod tensor;

use thiserror::Error;

pub use batchnorm::{bn_apply, bn_backward, bn_forward, BnCache, BnForward, BnMode, BnState, Pass};
pub use conv::{Conv2d, Padding};
pub use layers::{Layer, Linear};
pub use network::{EegNetConfig, Encoded, ForwardCache, ForwardResult, GradScope, Network, ParamGrads};
pub use optim::{OptKind, OptState};
pub use real::Real;
pub use tensor::{Dims, Tensor4};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid network configuration: {0}")]
    Config(String),
    #[error("stale forward cache: {0}")]
    StaleCache(String),
}
