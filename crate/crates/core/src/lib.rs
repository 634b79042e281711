//! Impulsive ordinary differential equations driven by shaped delta inputs.

// `!(a < b)` is deliberate: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod avoidance;
pub mod error;
pub mod expr;
pub mod frobenius;
pub mod jump;
pub mod model;
mod ode;
pub mod quad;
pub mod regularization;
pub mod scenario;
pub mod solver;
pub mod viability;

pub use error::{Error, Position, Result};
pub use expr::Expr;
