//! Stateless forward/backward kernels on [`Tensor`](crate::Tensor)s.
//!
//! These are usable on their own; the graph executor in [`crate::exec`]
//! dispatches to them.

pub mod conv;
pub mod dense;
pub mod norm;
pub mod pool;

pub use conv::{conv2d, conv2d_backward, conv2d_shape};
pub use dense::{
    add, concat_channels, linear, linear_backward, relu, softmax_xent, softmax_xent_backward, tanh,
};
pub use norm::{batchnorm2d_eval, batchnorm2d_train, BN_EPS, BN_MOMENTUM};
pub use pool::{avgpool2d, global_avgpool, maxpool2d};
