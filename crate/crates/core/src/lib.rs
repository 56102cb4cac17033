// Negated comparisons like `!(x > 0.0)` are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod coarse;
pub mod error;
pub mod geometry;
pub mod io;
pub mod refine;
pub mod sim;

pub use error::{Error, Result, Stage};
pub use nalgebra;
