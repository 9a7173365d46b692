//! Inexact high-order proximal-point and tensor methods for composite convex
//! problems `min f(x) + ψ(x)`.

// Parameter checks are written as `!(x > 0.0)` on purpose so NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accel;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod methods;
pub mod model;
pub mod policies;
pub mod problems;
pub mod subsolvers;

pub use error::{Error, Result};
