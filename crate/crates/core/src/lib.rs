//! Translation-equivariant adaptive attention on a small dense tensor core.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below pin the common choices. Audits, oracles and gradient checks
//! are meant to run in `f64`.

pub mod attention;
pub mod autodiff;
pub mod cost;
pub mod crosscheck;
pub mod degenerate;
pub mod equivariance;
pub mod error;
pub mod fault;
pub mod gradcheck;
pub mod io;
pub mod mac;
pub mod model;
pub mod ops;
pub mod oracle;
pub mod scalar;
pub mod tensor;

pub use error::{Result, TeaError};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type AttnParams64 = attention::AttnParams<f64>;
pub type AttnParams32 = attention::AttnParams<f32>;
pub type Model64 = model::Model<f64>;
pub type Model32 = model::Model<f32>;
