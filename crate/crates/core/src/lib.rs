//! Fluid dynamic DNNs: a width-sliced MNIST CNN whose six overlapping
//! sub-networks share one parameter store, trained with nested incremental
//! training.

pub mod data;
pub mod error;
pub mod model;
pub mod ops;
pub mod optim;
#[cfg(any(test, feature = "oracles"))]
pub mod oracle;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use optim::Hyper;
pub use tensor::{Scalar, Tensor};
