#![no_std]

extern crate alloc;

pub mod autograd;
pub mod checkpoint;
pub mod critic;
pub mod data;
pub mod error;
pub mod features;
pub mod glassnet;
pub mod gradcheck;
pub mod innorm;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod real;
pub mod tensor;
pub mod trainer;

pub use autograd::{grad, Gradients, OpCategory, Var};
pub use error::{Error, Result};
pub use real::Real;
pub use tensor::{Shape, Tensor};
