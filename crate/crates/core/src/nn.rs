//! Trainable parameters and the convolution layers built on them.

use alloc::string::String;
use alloc::vec::Vec;
use core::cell::RefCell;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::Var;
use crate::error::Result;
use crate::innorm::{instance_norm, InConfig, InMode};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

/// Standard deviation of the zero-mean Gaussian weight init.
pub const INIT_STD: f64 = 0.02;

/// A named trainable tensor. Each read hands out the same graph leaf until the
/// value is replaced, so gradients can be looked up by the leaf returned from
/// [`Param::var`].
pub struct Param<T: Real> {
    name: String,
    var: RefCell<Var<T>>,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Param { name: name.into(), var: RefCell::new(Var::param(value)) }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn var(&self) -> Var<T> {
        self.var.borrow().clone()
    }

    pub fn value(&self) -> Tensor<T> {
        self.var.borrow().value().clone()
    }

    pub fn shape(&self) -> Shape {
        self.var.borrow().shape()
    }

    pub fn set(&self, value: Tensor<T>) {
        *self.var.borrow_mut() = Var::param(value);
    }
}

impl<T: Real> core::fmt::Debug for Param<T> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "Param({}, {})", self.name, self.shape())
    }
}

pub fn gaussian<T: Real, R: Rng + ?Sized>(shape: Shape, std: f64, rng: &mut R) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::lit(normal.sample(rng)))
}

pub fn param_count<T: Real>(params: &[&Param<T>]) -> usize {
    params.iter().map(|p| p.shape().numel()).sum()
}

#[derive(Debug)]
pub struct Conv2d<T: Real> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, rng: &mut R) -> Self {
        Conv2d {
            weight: Param::new(alloc::format!("{name}.weight"), gaussian(Shape::new(c_out, c_in, k, k), INIT_STD, rng)),
            bias: Param::new(alloc::format!("{name}.bias"), Tensor::zeros([1, c_out, 1, 1])),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        x.conv2d(&self.weight.var(), self.stride, self.pad)?.add(&self.bias.var())
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n()
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        alloc::vec![&self.weight, &self.bias]
    }
}

/// Transposed convolution; weight layout `[c_in, c_out, k, k]`.
#[derive(Debug)]
pub struct ConvTranspose2d<T: Real> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Real> ConvTranspose2d<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, rng: &mut R) -> Self {
        ConvTranspose2d {
            weight: Param::new(alloc::format!("{name}.weight"), gaussian(Shape::new(c_in, c_out, k, k), INIT_STD, rng)),
            bias: Param::new(alloc::format!("{name}.bias"), Tensor::zeros([1, c_out, 1, 1])),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Var<T>, out_h: usize, out_w: usize) -> Result<Var<T>> {
        x.conv_transpose2d(&self.weight.var(), self.stride, self.pad, out_h, out_w)?.add(&self.bias.var())
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        alloc::vec![&self.weight, &self.bias]
    }
}

/// Normalization used inside generator residual blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NormKind {
    /// Instance norm through axis reductions.
    Direct,
    /// Instance norm through average pooling.
    #[default]
    AvgPool,
    None,
    /// Batch statistics over `(N, H, W)`; no running averages.
    Batch,
}

impl NormKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            NormKind::Direct => "direct",
            NormKind::AvgPool => "avgpool",
            NormKind::None => "none",
            NormKind::Batch => "batch",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "direct" => NormKind::Direct,
            "avgpool" => NormKind::AvgPool,
            "none" => NormKind::None,
            "batch" => NormKind::Batch,
            _ => return None,
        })
    }

    pub fn apply<T: Real>(&self, x: &Var<T>, epsilon: f64) -> Result<Var<T>> {
        match self {
            NormKind::Direct => instance_norm(x, &InConfig { epsilon, mode: InMode::Direct }),
            NormKind::AvgPool => instance_norm(x, &InConfig { epsilon, mode: InMode::AvgPool }),
            NormKind::None => Ok(x.clone()),
            NormKind::Batch => {
                let s = x.shape();
                let per_channel = Shape::new(1, s.c(), 1, 1);
                let inv = T::one() / T::lit((s.n() * s.hw()) as f64);
                let mean = x.sum_to(per_channel)?.mul_scalar(inv);
                let centered = x.sub(&mean)?;
                let var = centered.square().sum_to(per_channel)?.mul_scalar(inv);
                centered.div(&var.add_scalar(T::lit(epsilon)).sqrt())
            }
        }
    }
}
