//! Text-conditioned cross attention over multi-layer visual features.
//!
//! The pipeline runs three attention stages in sequence: a joint
//! layer-patch gate ([`lpwca`]), a Gaussian-smoothed layer weighting
//! ([`lwca`]) and a patch gate ([`pwca`]). The result is fused with the last
//! visual layer and projected for a downstream decoder ([`pipeline`]).

pub mod cli;
pub mod conditioning;
pub mod error;
pub mod lpwca;
pub mod lwca;
pub mod numerics;
pub mod pipeline;
pub mod pwca;

pub use error::{CcraError, Result};
pub use numerics::Tensor;
