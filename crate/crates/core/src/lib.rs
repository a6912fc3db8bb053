//! Joint modelling of mortality surfaces across populations with
//! multi-output Gaussian processes.
//!
//! Log death rates over (age, year) are modelled per population as a
//! quadratic-in-age, linear-in-year trend plus a Gaussian process with a
//! Matérn-5/2 kernel. Populations are coupled through a coregionalization
//! matrix: the intrinsic coregionalization model (ICM), the semiparametric
//! latent factor model (SLFM) or a multi-level ICM whose coregionalization
//! matrix is a Kronecker product over factor dimensions.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytics;
pub mod artifact;
pub mod cli;
pub mod datastore;
pub mod error;
pub mod gp_core;
pub mod inference;
pub mod kernels;
pub mod linalg;
pub mod optim;
pub mod synthetic;

pub use error::{Error, ErrorCategory, Result};
