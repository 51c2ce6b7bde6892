//! Hexagonal convolution on square-lattice tensors and CIFAR-style residual
//! networks that use it for their dimension-changing shortcuts.

pub mod error;
pub mod rng;
pub mod tensor;
pub mod hex;
pub mod conv;
pub mod gradcheck;
pub mod hexconv;
pub mod layers;
pub mod resnet;
pub mod cifar;
pub mod train;
pub mod checkpoint;
pub mod bench;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Scalar, Tensor};
