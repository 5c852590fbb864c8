//! Position-adaptive point convolution (PAConv) with dynamic kernel assembly.
//!
//! The crate covers the operator ([`paconv`]), its hand-derived gradients and a
//! finite-difference checker ([`autograd`]), the Weight Bank correlation
//! regularizer ([`regularize`]), neighborhood construction ([`geometry`]), a
//! small synthetic training harness ([`trainer`]), and the accounting and
//! diagnostics that back the command-line tools ([`cost`], [`equivalence`],
//! [`scorefield`]).
//!
//! Numeric code is generic over [`Real`]: `f32`, `f64`, and a double-double
//! type used as the reference for gradient checks.

pub mod autograd;
pub mod cost;
pub mod equivalence;
pub mod error;
pub mod features;
pub mod geometry;
pub mod paconv;
pub mod regularize;
pub mod scalar;
pub mod scorefield;
pub mod trainer;

pub use error::{Error, Result};
pub use features::FeatureMap;
pub use scalar::{Precision, Real};
