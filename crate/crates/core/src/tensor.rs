//! Dense rank-4 (`N, C, H, W`) tensors with shared, immutable storage.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const SCALAR: Shape = Shape([1, 1, 1, 1]);

    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }

    pub fn c(&self) -> usize {
        self.0[1]
    }

    pub fn h(&self) -> usize {
        self.0[2]
    }

    pub fn w(&self) -> usize {
        self.0[3]
    }

    pub fn hw(&self) -> usize {
        self.0[2] * self.0[3]
    }

    /// Row-major strides; broadcast dimensions (size 1) get stride 0 when
    /// expanded against `target`.
    pub(crate) fn strides(&self) -> [usize; 4] {
        let [_, c, h, w] = self.0;
        [c * h * w, h * w, w, 1]
    }

    pub(crate) fn broadcast_strides(&self, target: &Shape) -> [usize; 4] {
        let s = self.strides();
        let mut out = [0; 4];
        for d in 0..4 {
            out[d] = if self.0[d] == target.0[d] { s[d] } else { 0 };
        }
        out
    }

    /// Result shape of broadcasting two shapes (numpy rules restricted to rank 4).
    pub fn broadcast(&self, other: &Shape, op: &'static str) -> Result<Shape> {
        let mut out = [0; 4];
        for d in 0..4 {
            let (a, b) = (self.0[d], other.0[d]);
            out[d] = if a == b || b == 1 {
                a
            } else if a == 1 {
                b
            } else {
                return Err(Error::ShapeMismatch { op, lhs: *self, rhs: *other });
            };
        }
        Ok(Shape(out))
    }

    /// Whether `self` can be broadcast up to `target`.
    pub fn broadcasts_to(&self, target: &Shape) -> bool {
        (0..4).all(|d| self.0[d] == target.0[d] || self.0[d] == 1)
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "[{n}, {c}, {h}, {w}]")
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl From<[usize; 4]> for Shape {
    fn from(v: [usize; 4]) -> Self {
        Shape(v)
    }
}

#[derive(Clone)]
pub struct Tensor<T> {
    shape: Shape,
    data: Arc<[T]>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Shape>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.numel() != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                reason: alloc::format!("{} elements for shape {shape}", data.len()),
            });
        }
        Ok(Tensor { shape, data: data.into() })
    }

    pub(crate) fn from_vec(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor { shape, data: data.into() }
    }

    pub fn full(shape: impl Into<Shape>, v: T) -> Self {
        let shape = shape.into();
        Tensor::from_vec(shape, vec![v; shape.numel()])
    }

    pub fn zeros(shape: impl Into<Shape>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn scalar(v: T) -> Self {
        Self::full(Shape::SCALAR, v)
    }

    pub fn from_fn(shape: impl Into<Shape>, mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let shape = shape.into();
        let [n, c, h, w] = shape.0;
        let mut data = Vec::with_capacity(shape.numel());
        for a in 0..n {
            for b in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f([a, b, y, x]));
                    }
                }
            }
        }
        Tensor::from_vec(shape, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.to_vec()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn at(&self, idx: [usize; 4]) -> T {
        let s = self.shape.strides();
        self.data[idx[0] * s[0] + idx[1] * s[1] + idx[2] * s[2] + idx[3] * s[3]]
    }

    /// First element; the value of a scalar tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor::from_vec(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn reshape(&self, shape: impl Into<Shape>) -> Result<Self> {
        let shape = shape.into();
        if shape.numel() != self.numel() {
            return Err(Error::InvalidShape {
                op: "reshape",
                reason: alloc::format!("{} -> {shape}", self.shape),
            });
        }
        Ok(Tensor { shape, data: self.data.clone() })
    }

    /// Elementwise binary op with broadcasting.
    pub fn zip_with(&self, other: &Tensor<T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        let out = self.shape.broadcast(&other.shape, op)?;
        if self.shape == other.shape {
            let data = self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect();
            return Ok(Tensor::from_vec(out, data));
        }
        let sa = self.shape.broadcast_strides(&out);
        let sb = other.shape.broadcast_strides(&out);
        let [n, c, h, w] = out.0;
        let mut data = Vec::with_capacity(out.numel());
        for i0 in 0..n {
            for i1 in 0..c {
                for i2 in 0..h {
                    let ba = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                    let bb = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                    for i3 in 0..w {
                        data.push(f(self.data[ba + i3 * sa[3]], other.data[bb + i3 * sb[3]]));
                    }
                }
            }
        }
        Ok(Tensor::from_vec(out, data))
    }

    /// Sums broadcast dimensions away so the result has shape `target`.
    pub fn sum_to(&self, target: Shape) -> Result<Self> {
        if self.shape == target {
            return Ok(self.clone());
        }
        if !target.broadcasts_to(&self.shape) {
            return Err(Error::ShapeMismatch { op: "sum_to", lhs: self.shape, rhs: target });
        }
        let st = target.broadcast_strides(&self.shape);
        let mut acc = vec![T::zero(); target.numel()];
        let [n, c, h, w] = self.shape.0;
        let mut i = 0;
        for i0 in 0..n {
            for i1 in 0..c {
                for i2 in 0..h {
                    let base = i0 * st[0] + i1 * st[1] + i2 * st[2];
                    for i3 in 0..w {
                        let j = base + i3 * st[3];
                        acc[j] = acc[j] + self.data[i];
                        i += 1;
                    }
                }
            }
        }
        Ok(Tensor::from_vec(target, acc))
    }

    /// Repeats size-1 dimensions up to `target`.
    pub fn broadcast_to(&self, target: Shape) -> Result<Self> {
        if self.shape == target {
            return Ok(self.clone());
        }
        if !self.shape.broadcasts_to(&target) {
            return Err(Error::ShapeMismatch { op: "broadcast_to", lhs: self.shape, rhs: target });
        }
        let z = Tensor::zeros(target);
        z.zip_with(self, "broadcast_to", |_, b| b)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn mean_f64(&self) -> f64 {
        self.sum_f64() / self.numel() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs().as_f64())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::from_vec(self.shape, self.data.iter().map(|v| U::lit(v.as_f64())).collect())
    }

    /// Channel-axis concatenation of tensors that agree on `N, H, W`.
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::InvalidInput("concat of nothing".into()))?;
        let [n, _, h, w] = first.shape.0;
        let mut c_total = 0;
        for p in parts {
            let s = p.shape;
            if s.n() != n || s.h() != h || s.w() != w {
                return Err(Error::ShapeMismatch { op: "concat", lhs: first.shape, rhs: s });
            }
            c_total += s.c();
        }
        let mut data = Vec::with_capacity(n * c_total * h * w);
        for b in 0..n {
            for p in parts {
                let chunk = p.shape.c() * h * w;
                data.extend_from_slice(&p.data[b * chunk..(b + 1) * chunk]);
            }
        }
        Ok(Tensor::from_vec(Shape::new(n, c_total, h, w), data))
    }

    pub fn narrow_channels(&self, start: usize, len: usize) -> Result<Self> {
        let [n, c, h, w] = self.shape.0;
        if start + len > c {
            return Err(Error::InvalidShape {
                op: "narrow_channels",
                reason: alloc::format!("{start}+{len} > {c}"),
            });
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            let off = (b * c + start) * plane;
            data.extend_from_slice(&self.data[off..off + len * plane]);
        }
        Ok(Tensor::from_vec(Shape::new(n, len, h, w), data))
    }

    /// Zero tensor with `total` channels holding `self` at channel offset `start`.
    pub fn embed_channels(&self, total: usize, start: usize) -> Result<Self> {
        let [n, c, h, w] = self.shape.0;
        if start + c > total {
            return Err(Error::InvalidShape {
                op: "embed_channels",
                reason: alloc::format!("{start}+{c} > {total}"),
            });
        }
        let plane = h * w;
        let mut data = vec![T::zero(); n * total * plane];
        for b in 0..n {
            let dst = (b * total + start) * plane;
            let src = b * c * plane;
            data[dst..dst + c * plane].copy_from_slice(&self.data[src..src + c * plane]);
        }
        Ok(Tensor::from_vec(Shape::new(n, total, h, w), data))
    }

    /// Spatial window `[y0, y0+h) × [x0, x0+w)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        let s = self.shape;
        if y0 + h > s.h() || x0 + w > s.w() {
            return Err(Error::InvalidShape {
                op: "crop",
                reason: alloc::format!("window {h}x{w}@({y0},{x0}) outside {s}"),
            });
        }
        Ok(Tensor::from_fn(Shape::new(s.n(), s.c(), h, w), |[a, b, y, x]| {
            self.at([a, b, y + y0, x + x0])
        }))
    }

    /// Stack along the batch axis.
    pub fn stack(parts: &[Tensor<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::InvalidInput("stack of nothing".into()))?;
        let [_, c, h, w] = first.shape.0;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            let [pn, pc, ph, pw] = p.shape.0;
            if (pc, ph, pw) != (c, h, w) {
                return Err(Error::ShapeMismatch { op: "stack", lhs: first.shape, rhs: p.shape });
            }
            n += pn;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor::from_vec(Shape::new(n, c, h, w), data))
    }

    pub fn sample(&self, i: usize) -> Result<Self> {
        let [n, c, h, w] = self.shape.0;
        if i >= n {
            return Err(Error::InvalidInput(alloc::format!("sample {i} of batch {n}")));
        }
        let len = c * h * w;
        Ok(Tensor::from_vec(Shape::new(1, c, h, w), self.data[i * len..(i + 1) * len].to_vec()))
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{}>{}", T::NAME, self.shape)?;
        if self.numel() <= 16 {
            write!(f, " {:?}", &self.data[..])?;
        }
        Ok(())
    }
}
