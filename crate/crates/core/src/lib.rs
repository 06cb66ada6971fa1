//! Full-rank response retrieval for dialogues.

// Range checks are written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod binio;
pub mod corpus;
pub mod dense;
pub mod error;
pub mod eval;
pub mod expansion;
pub mod harness;
pub mod negatives;
pub mod ranking;
pub mod seeds;
pub mod sparse;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
