//! The width-sliceable network and its six sub-networks.

pub mod arch;
pub mod dense;
pub mod forward;
pub mod freeze;
pub mod params;
pub mod partition;
pub mod subnet;

pub use arch::{ArchConfig, Group, ARCH};
pub use dense::{dense_forward, extract_dense, DenseNet};
pub use forward::{backward, forward, forward_train, NetView};
pub use freeze::{freeze_mask, FreezeMask, FreezePolicy};
pub use params::{holdings, init_params, FluidParams, ParamSet, ParamUnit, TensorSlot};
pub use partition::Half;
pub use subnet::{subnet_spec, SubnetId, SubnetSpec};
