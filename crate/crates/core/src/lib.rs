pub mod audit;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{no_grad, Scalar, Tensor};
