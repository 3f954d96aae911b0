pub mod autodiff;
pub mod compression;
pub mod corpus;
pub mod dsp;
pub mod encoders;
pub mod error;
pub mod evalmetrics;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod privacy;
pub mod quantizers;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
