//! Regularized Tyler (robust shrinkage) scatter estimation for elliptical
//! data, the random-matrix deterministic equivalents that describe it, the
//! adaptive GLRT built on it and its false-alarm theory, a data-driven
//! shrinkage selector, and a Monte Carlo harness that checks all of it.

// Range checks are written `!(x > lo)` on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod detector;
pub mod error;
pub mod estimators;
pub mod linalg;
pub mod model;
pub mod montecarlo;
pub mod rmt;
pub mod rng;

pub use error::{Error, Result};
