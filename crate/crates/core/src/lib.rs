//! Shonan rotation averaging: certifiably optimal estimation of absolute
//! rotations from noisy relative measurements.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod certifier;
pub mod error;
pub mod io;
mod lanczos;
pub mod local_solver;
pub mod manifold;
mod pcg;
pub mod problem;
pub mod staircase;

pub use error::{Result, ShonanError};
