// `!(x > 0.0)` style checks deliberately reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod envmap;
pub mod error;
pub mod image;
pub mod math;
pub mod metrics;
pub mod nn;
pub mod optics;
pub mod oracle;
pub mod scalar;
pub mod sdf;
pub mod train;

pub use scalar::Real;

pub type Vec3d = math::Vec3<f64>;
pub type Vec3f = math::Vec3<f32>;
pub type Ray3d = math::Ray<f64>;
