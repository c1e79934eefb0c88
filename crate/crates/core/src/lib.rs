pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod loss;
pub mod matcher;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod triple;

pub use error::{Error, Result};
pub use tensor::Tensor;
