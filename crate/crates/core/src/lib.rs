//! Measurement-noise covariance design for lower-bounding the steady-state
//! Kalman filter prior error covariance.

// NaN must fail positivity checks, and the dense kernels index by row and column.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bounds;
pub mod cli;
pub mod design;
pub mod kalman;
pub mod linalg;
pub mod model;
pub mod riccati;

pub use linalg::Matrix;
pub use model::LinearSystem;
