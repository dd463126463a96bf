//! Per-layer forward and explicit backward kernels.

pub mod act;
pub mod conv;
pub mod fc;
pub mod loss;
pub mod pool;

pub use act::{relu, relu_backward};
pub use conv::{conv2d_backward, conv2d_backward_sliced, conv2d_forward, conv2d_forward_sliced};
pub use fc::{fc_backward, fc_backward_sliced, fc_forward, fc_forward_sliced};
pub use loss::softmax_xent;
pub use pool::{maxpool2, maxpool2_backward, PoolIndex};
