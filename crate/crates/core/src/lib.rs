#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` deliberately rejects NaN

pub mod check;
pub mod cli;
pub mod classify;
pub mod config;
pub mod data;
pub mod error;
pub mod linalg;
pub mod losses;
pub mod net;
pub mod pedcc;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
