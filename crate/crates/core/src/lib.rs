//! Learned minimal-deviation residual corrections for tabular event samples.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod baseline;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod models;
pub mod observables;
pub mod par;
pub mod training;
pub mod util;

pub use error::{Error, Result};
