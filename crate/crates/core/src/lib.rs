//! Random pair-rotation noise ("RotationOut"), the dropout family it is
//! compared against, and a numerics lab that checks their variance algebra
//! by Monte Carlo.
//!
//! Module map:
//!
//! - [`rotation`]: O(D) pair rotations, centered / feature-map / block /
//!   fixed-direction variants, exact transpose.
//! - [`regularizers`]: the [`regularizers::NoiseOp`] interface over rotation,
//!   Bernoulli, Gaussian and Uout noise, plus the centering wrapper.
//! - [`noise_lab`]: co-adaptation metric, conditional and total variance
//!   closed forms, reduction factors.
//! - [`linear_models`]: marginalized linear regression, conditioning, angle
//!   and margin demos.
//! - [`bn_lab`]: variance shift before batch normalization, small-batch BN
//!   nonlinearity, cross-normalization, polynomial test-mode correction.
//! - [`nn`]: a small fully-connected network with manual backprop.
//! - [`mc`] and [`stats`]: seeded, chunked Monte-Carlo plumbing and
//!   mergeable moment accumulators.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too, and index
// loops follow the matrix formulas they implement.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bn_lab;
pub mod error;
pub mod linear_models;
pub mod mc;
pub mod nn;
pub mod noise_lab;
pub mod regularizers;
pub mod rotation;
pub mod stats;

pub use error::{Error, Result};
