pub mod autodiff;
pub mod corpus;
pub mod datagen;
pub mod error;
pub mod harness;
pub mod memprobe;
pub mod model;
pub mod optim;
pub mod params;
pub mod retrieval;
pub mod rng;
pub mod tensor;
pub mod trainer;

#[cfg(test)]
mod testing;

pub use error::{Error, Result};
pub use tensor::Tensor;
