//! Attention-guided multiple-instance learning over silhouette gait
//! sequences: data handling, frame sampling and clustering, the network and
//! its losses, training, and screening metrics.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the common instantiations.

pub mod clustering;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod network;
pub mod sampling;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Model32 = network::Model<f32>;
pub type Model64 = network::Model<f64>;
