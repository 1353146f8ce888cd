//! Imaging transformer denoising at desk scale.
//!
//! 5D image tensors `[B, C, F, H, W]` flow through three attention mechanisms
//! (spatial local, spatial global, frame), composed into cells and blocks on a
//! two-resolution HRNet backbone. The crate also carries its own reverse-mode
//! differentiation, an Adam/one-cycle training loop, a synthetic MR noise
//! simulator with g-factor maps, image-quality metrics, and an attention
//! complexity benchmark.

pub mod attention;
pub mod complexity;
pub mod data;
pub mod error;
pub mod grad;
pub mod layout;
pub mod metrics;
pub mod model;
pub mod mrsim;
pub mod ops;
pub mod params;
pub mod real;
pub mod sweep;
pub mod tensor;
pub mod train;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use attention::{AttentionConfig, AttentionKind, AttentionParams};
pub use grad::{Graph, Var};
pub use layout::{DataMatrixSet, Layout, WindowSpec};
pub use model::{build_hrnet, BlockSpec, CellConfig, Model, ModelConfig};
pub use params::ParamStore;
pub use real::Real;
pub use tensor::{Array, Dims5, Tensor5D};
