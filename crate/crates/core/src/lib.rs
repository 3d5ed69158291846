//! Bayesian non-stationary spatial modelling with SPDE-based Gaussian Markov
//! random fields and replicated observations.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod eval;
pub mod fem;
pub mod gmrf;
pub mod lgm;
pub mod mesh;
pub mod prior;
pub mod sim;
pub mod spde;

pub use error::{Error, Result};
