//! Spiking neural networks with membrane-potential batch normalization,
//! threshold re-parameterization for deployment, and online test-time
//! adaptation by threshold modulation.

pub mod adapt;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod energy;
pub mod error;
pub mod lif;
pub mod network;
pub mod reparam;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
pub use network::{ModelMode, Network, NetworkSpec};
