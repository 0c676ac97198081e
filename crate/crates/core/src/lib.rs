//! Numerical laboratory for Witten-Laplacian representations of correlations
//! in lattice spin systems with convex Hamiltonians.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod correlation;
pub mod error;
pub mod grid;
mod kernels;
pub mod lattice;
pub mod oracle;
pub mod potential;
pub mod pressure;
pub mod witten;

pub use error::{Error, Result};
