//! Dynamic brand-topic model.
//!
//! Tracks brand polarity scores and polarity-bearing topics over a sequence
//! of review time slices. Each slice is fitted by reparameterised variational
//! inference of a Poisson factorisation whose word rates are shifted by
//! brand score times topic-word offset; slices are chained through Gaussian
//! state-space priors, and the topic-word initialisation of each slice is
//! interpolated between the previous slice and a fresh Poisson factorisation
//! by a weight derived from a Fisher-z test on validation brand rankings.

pub mod btm;
pub mod corpus;
pub mod dynamics;
pub mod error;
pub mod evaluation;
pub mod matrix;
pub mod numerics;
pub mod pf;
pub mod synthetic;

#[cfg(feature = "cli")]
pub mod cli;

mod io_util;
mod parallel;

pub use error::{DbtmError, Result};
pub use matrix::Matrix;
