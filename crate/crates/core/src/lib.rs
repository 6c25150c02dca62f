//! A desk-scale laboratory for length-controlled sequence generation with an
//! encoder–decoder transformer.
//!
//! The decoder can be told how long its output should be in four ways:
//! not at all ([`LengthControlMode::None`]), through a countdown embedding
//! ([`LengthControlMode::Rpe`]), through a progress-ratio "impatience"
//! embedding ([`LengthControlMode::Pre`]), or through a length-aware
//! cross-attention bias ([`LengthControlMode::Laam`]).
//!
//! Numerics are generic over [`Scalar`] (`f32` or `f64`). Training and
//! generation normally use `f32`; gradient checks use `f64`. The aliases
//! below name the two instantiations.

pub mod compute;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod kv;
pub mod model;
pub mod scalar;
pub mod seed;
pub mod signal;
pub mod tokens;
pub mod training;

pub use error::{Error, Result};
pub use model::{LengthControlMode, Model, ModelConfig};
pub use scalar::Scalar;

pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type Tensor32 = compute::Tensor<f32>;
pub type Tensor64 = compute::Tensor<f64>;
pub type Tape32<'p> = compute::Tape<'p, f32>;
pub type Tape64<'p> = compute::Tape<'p, f64>;
