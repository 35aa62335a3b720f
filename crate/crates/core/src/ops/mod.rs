//! Differentiable primitives. Each op is available as a pure function over
//! tensors and as a [`Tape`](crate::tape::Tape) method with an analytic
//! backward rule.

pub mod conv;
pub mod linear;
pub mod norm;
pub mod pool;

pub use conv::{conv2d, Conv2dSpec};
pub use linear::linear;
pub use norm::{batch_norm_eval, batch_norm_train, layer_norm, BatchNormOutput};
pub use pool::{avg_pool2d, bilinear_upsample2d, CountMode, PoolSpec};
