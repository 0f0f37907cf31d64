//! Invertible pyramid normalizing flow for unsupervised defect localization.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision for common use.

pub mod autodiff;
pub mod error;
pub mod flow;
pub mod model;
pub mod pyramid;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor4f32 = tensor::Tensor4<f32>;
pub type Tensor4f64 = tensor::Tensor4<f64>;
pub type PyramidStackF32 = pyramid::PyramidStack<f32>;
pub type PyramidStackF64 = pyramid::PyramidStack<f64>;
pub type ModelF32 = model::PyramidFlowModel<f32>;
pub type ModelF64 = model::PyramidFlowModel<f64>;
pub type TemplateF32 = train::LatentTemplate<f32>;
pub type TemplateF64 = train::LatentTemplate<f64>;
