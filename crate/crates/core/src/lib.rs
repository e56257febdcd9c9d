//! Scale-adaptive crowd counting: tensors, layers, density maps, the network
//! variants, training and evaluation.

pub mod data;
pub mod density;
pub mod error;
pub mod eval;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, ErrorClass, Result};
pub use tensor::{Rng, Shape, Tensor};
