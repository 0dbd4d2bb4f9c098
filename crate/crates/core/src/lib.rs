//! Generalized bilinear factorization by hybrid vector message passing.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod amp;
pub mod error;
pub mod harness;
pub mod hvmp;
pub mod linalg;
pub mod linops;
pub mod priors;
pub mod reference;
pub mod verify;

pub use error::{HvmpError, Result};
