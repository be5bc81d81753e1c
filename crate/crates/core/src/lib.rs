//! Graph-based log anomaly detection.
//!
//! Raw log lines are mined into event templates, grouped into sequences,
//! turned into weighted directed graphs and classified by a graph
//! transformer whose attention is biased by node degrees, shortest-path
//! distances and edge weights.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below name the two concrete instantiations.

pub mod embed;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod parse;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod window;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type GraphInput32 = model::GraphInput<f32>;
pub type GraphInput64 = model::GraphInput<f64>;
