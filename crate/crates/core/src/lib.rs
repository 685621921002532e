//! Group-wise multiscale deformable convolution and the FlowDCN generative
//! stack: linear flow-matching training, ODE/SDE samplers with classifier-free
//! guidance, and resolution extrapolation through per-axis scale adjustment.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod msdcn;
pub mod network;
pub mod rng;
pub mod sampler;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{LinearParams, Tensor};
