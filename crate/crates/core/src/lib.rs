//! Neural logic query recommender: query compilation, neural logic operators
//! and the small reverse-mode tensor engine they run on.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the type for the common cases.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod kv;
pub mod logic;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use config::{ModelConfig, Variant};
pub use error::{Error, Result};
pub use model::{LossBreakdown, Model};
pub use scalar::Scalar;
pub use tape::{Gradients, Primitive, Tape, Var};
pub use tensor::Tensor;

/// Single-precision instantiations, used for training.
pub type ModelF32 = Model<f32>;
pub type TapeF32 = Tape<f32>;
pub type TensorF32 = Tensor<f32>;

/// Double-precision instantiations, used for gradient checks.
pub type ModelF64 = Model<f64>;
pub type TapeF64 = Tape<f64>;
pub type TensorF64 = Tensor<f64>;
