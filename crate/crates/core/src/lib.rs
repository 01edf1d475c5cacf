//! Zero-padded (expansive) 1D convolution algebra, compilation of dense ReLU
//! networks into filter cascades with location-based pooling, and a small
//! trainer for the accompanying toy regression experiments.

pub mod convops;
pub mod error;
pub mod factorize;
pub mod nets;
pub mod primitives;
pub mod train;

pub use error::{Error, Result};
pub use primitives::{Filter, Matrix, PoolingSpec, SupportedVector, TranslationOp};
