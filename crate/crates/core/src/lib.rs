//! Moment-based estimation of weakly separated Gaussian mixtures whose
//! components have low-rank covariances `Sigma_j = V_j V_j^T`.
//!
//! The central estimator is a diagonally weighted GMM (DGMM): it reweights the
//! per-order moment residuals by scalars instead of inverting a full moment
//! covariance, and evaluates every moment quantity through Gram-level scalars
//! so no `d^k` tensor is ever formed.

// Index loops follow the formulas; `!(x > 0.0)` also rejects NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod bell;
pub mod error;
pub mod estimator;
pub mod experiment;
pub mod implicit;
pub mod kernel;
pub mod model;
pub mod par;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
