//! Concept-tracing semantic attention networks.
//!
//! A concept-word detector built from spatially attending tracing LSTMs feeds
//! semantic-attention language heads for video description, fill-in-the-blank,
//! multiple-choice and retrieval. Everything runs on a small reverse-mode
//! differentiation engine generic over the scalar type.

mod error;
pub mod kv;
mod scalar;

pub mod concept;
pub mod eval;
pub mod corpus;
pub mod nn;
pub mod models;
pub mod semattn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};
pub use tensor::{ParamId, ParamStore, Tape, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
