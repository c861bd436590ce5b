// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod init;
pub mod kernels;
pub mod likelihood;
pub mod linalg;
pub mod meanfield;
pub mod optimize;
pub mod svgp;
pub mod train;

pub use error::{Error, Result};
