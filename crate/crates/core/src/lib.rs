// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod counters;
pub mod data;
pub mod error;
pub mod flow;
pub mod harness;
pub mod net;
pub mod operators;
pub mod prox;
pub mod rng;
pub mod solver;
pub mod train;

pub use error::{Error, Result};
