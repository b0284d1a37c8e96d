// Index loops mirror the tensor-product formulas; negated comparisons reject NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod assembly;
pub mod bspline;
pub mod coupling;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod linalg;
pub mod solver;

pub use error::{Error, Result};
