//! Multimodal extreme-summarization model built on a small reverse-mode
//! tensor library.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below pin the `f64` instantiation used for training and serving.

pub mod autograd;
pub mod checkpoint;
pub mod decoder;
pub mod dfhc;
pub mod error;
pub mod eval;
pub mod features;
pub mod fusion;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod tokens;
pub mod training;
pub mod wret;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use gradcheck::{grad_check, grad_check_many, grad_check_params, GradCheckReport};
pub use params::{Graph, ParamId, ParamStore};
pub use rng::SeededRng;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
