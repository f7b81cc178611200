//! Curvature-guided pruning for small feed-forward networks.
//!
//! Estimates the dominant Hessian eigenvector with finite-difference
//! Hessian-vector products and power iteration, scores weights by the
//! magnitude of their eigenvector components, and merges less significant
//! weights into significant ones along a cyclic pairing before masking.
//! Baseline strategies, FLOPs accounting, activation probes and a seeded
//! experiment pipeline sit alongside.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the storage type.

pub mod checkpoint;
pub mod curvature;
pub mod data;
pub mod error;
pub mod experiment;
pub mod flops;
pub mod layer;
pub mod network;
pub mod probe;
pub mod prune;
pub mod scalar;
pub mod seeding;
pub mod tensor;

pub use error::{Error, Result};
pub use layer::{Layer, LayerSpec};
pub use network::{Batch, ForwardPass, Network, ParamBlock, ParamKind};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Network32 = Network<f32>;
pub type Network64 = Network<f64>;
pub type Batch32 = Batch<f32>;
pub type Batch64 = Batch<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
