//! Enhanced deformable separable convolution for video frame interpolation.
//!
//! The crate contains a small reverse-mode autodiff engine over rank-4
//! tensors, the deformable separable synthesis operator together with the
//! reference operators it reduces to, the estimator network, training,
//! evaluation metrics, a synthetic motion generator, and file formats.

pub mod autodiff;
pub mod datagen;
pub mod deformable;
pub mod error;
pub mod frame;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod model;
pub mod real;
pub mod sampling;
pub mod tensor;
pub mod training;

pub use autodiff::{Graph, NodeId};
pub use error::{Error, Result};
pub use frame::Frame;
pub use real::Real;
pub use tensor::{Shape, Tensor};
