//! Generalized reweighting (GRW) training for overparameterized models:
//! ERM, importance weighting, Group DRO and CVaR on linear models and wide
//! NTK-parameterized networks, with the closed-form references their
//! implicit bias predicts.
// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod data;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod losses;
pub mod models;
pub mod oracles;
pub mod reweighting;
pub mod trainer;

pub use error::{GrwError, Result};
