//! Files, datasets, evaluation and the command-line front end for `bokeh-core`.

pub mod ckpt;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod selftest;
pub mod train;

pub use error::{AppError, Result};
