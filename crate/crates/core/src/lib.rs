//! Stick-breaking local winner-takes-all (SB-LWTA) Bayesian networks.
//!
//! Dense and convolutional layers of competing linear units whose connection
//! (or kernel) utility is inferred under an Indian Buffet Process prior. After
//! training, low-utility components are pruned and per-layer floating-point
//! precision is derived from the weight posterior variances.

pub mod checkpoint;
pub mod cli;
pub mod compress;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod layers;
pub mod model;
pub mod special;
pub mod stochastic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
