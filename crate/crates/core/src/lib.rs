// `!(x > 0.0)` is how validation rejects NaN along with the out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod fl;
pub mod harness;
pub mod nn;
pub mod pruner;
pub mod sparse;

pub use error::{Error, Result};
