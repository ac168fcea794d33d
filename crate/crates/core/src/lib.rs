//! Measuring, fitting and routing around the linear part of transformer MLPs.

pub mod analysis;
pub mod capture;
mod error;
pub mod eval;
pub mod gate;
pub mod linalg;
pub mod model;
pub mod progressive;
mod scalar;
pub mod surrogate;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix32 = linalg::Matrix<f32>;
pub type Matrix64 = linalg::Matrix<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type Surrogate32 = surrogate::LinearSurrogate<f32>;
pub type Surrogate64 = surrogate::LinearSurrogate<f64>;
