//! Debiased estimation of individual effects for multi-dimensional continuous
//! treatments, with an outcome response that is monotone in each treatment by
//! construction.

pub mod baselines;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod nn;
pub mod training;

pub use error::{MtdmlError, Result};
