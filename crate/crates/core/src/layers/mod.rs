//! Primitive forward/backward kernels used by the graph engine.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod dense;
pub mod loss;
pub mod pool;

pub use activation::{activation_backward, activation_forward, ActivationRule};
pub use batchnorm::{batchnorm_backward, batchnorm_forward, BatchNormCache, BatchNormSpec};
pub use conv::{conv2d_backward, conv2d_forward, Conv2dSpec, Padding};
pub use dense::{dense_backward, dense_forward};
pub use loss::{softmax, softmax_cross_entropy, softmax_cross_entropy_backward};
pub use pool::{
    global_avg_pool_backward, global_avg_pool_forward, maxpool2d_backward, maxpool2d_forward,
};
