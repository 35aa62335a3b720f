//! TM-UNet: a U-shaped segmentation network whose deep stages mix
//! convolutional features with a token-memory pathway built on an
//! exponentially gated matrix-memory recurrence.
//!
//! Everything is generic over the [`Scalar`] element type; the aliases below
//! fix it to `f32` for training and `f64` for verification.

pub mod bench;
pub mod error;
pub mod experiment;
pub mod flops;
pub mod gradcheck;
pub mod io;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod mstm;
pub mod nn;
pub mod ops;
pub mod scalar;
pub mod sequence;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamStore32 = nn::ParamStore<f32>;
pub type ParamStore64 = nn::ParamStore<f64>;
