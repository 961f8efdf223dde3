//! Reverse-mode automatic differentiation on rank-4 tensors.
//!
//! Every backward rule is written in terms of the same differentiable
//! operations, so gradients can themselves be differentiated
//! (`create_graph = true`). The critic's gradient penalty depends on this.
//!
//! Nodes get monotonically increasing ids at creation; since parents always
//! exist before their children, descending id order is a valid reverse
//! topological order.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::rc::Rc;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, PoolGeom};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

/// Coarse classification of graph operations, used to audit which primitive
/// kinds a computation was assembled from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpCategory {
    Leaf,
    /// Pointwise arithmetic, including implicit broadcasting of size-1 axes.
    Elementwise,
    /// Explicit expansion of size-1 axes.
    Broadcast,
    /// Windowed spatial pooling and its adjoint.
    Pooling,
    /// Reduction along an axis (`reduce_mean`, `sum_to`).
    Reduction,
    Convolution,
    /// Concatenation, slicing, reshaping and index scatter/gather.
    Layout,
}

#[derive(Clone)]
enum Op<T: Real> {
    Add(Var<T>, Var<T>),
    Sub(Var<T>, Var<T>),
    Mul(Var<T>, Var<T>),
    Div(Var<T>, Var<T>),
    AddScalar(Var<T>),
    MulScalar(Var<T>, T),
    Sqrt(Var<T>),
    Tanh(Var<T>),
    /// Multiplication by a constant (non-differentiated) tensor; covers ReLU,
    /// leaky ReLU, clamp and abs derivatives.
    MaskMul(Var<T>, Arc<Tensor<T>>),
    Conv(Var<T>, Var<T>, ConvGeom),
    ConvInput(Var<T>, Var<T>, ConvGeom),
    ConvWeight(Var<T>, Var<T>, ConvGeom),
    AvgPool(Var<T>, PoolGeom),
    AvgPoolAdjoint(Var<T>, PoolGeom),
    Scatter(Var<T>, Arc<Vec<u32>>),
    Gather(Var<T>, Arc<Vec<u32>>),
    ReduceMeanHw(Var<T>),
    SumTo(Var<T>),
    BroadcastTo(Var<T>),
    Concat(Vec<Var<T>>),
    Narrow(Var<T>, usize),
    Embed(Var<T>, usize),
    Reshape(Var<T>),
}

impl<T: Real> Op<T> {
    fn category(&self) -> OpCategory {
        use Op::*;
        match self {
            Add(..) | Sub(..) | Mul(..) | Div(..) | AddScalar(..) | MulScalar(..) | Sqrt(..) | Tanh(..) | MaskMul(..) => {
                OpCategory::Elementwise
            }
            Conv(..) | ConvInput(..) | ConvWeight(..) => OpCategory::Convolution,
            AvgPool(..) | AvgPoolAdjoint(..) => OpCategory::Pooling,
            ReduceMeanHw(..) | SumTo(..) => OpCategory::Reduction,
            BroadcastTo(..) => OpCategory::Broadcast,
            Scatter(..) | Gather(..) | Concat(..) | Narrow(..) | Embed(..) | Reshape(..) => OpCategory::Layout,
        }
    }

    fn parents(&self) -> Vec<&Var<T>> {
        use Op::*;
        match self {
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => vec![a, b],
            Conv(a, b, _) | ConvInput(a, b, _) | ConvWeight(a, b, _) => vec![a, b],
            AddScalar(a)
            | MulScalar(a, _)
            | Sqrt(a)
            | Tanh(a)
            | MaskMul(a, _)
            | AvgPool(a, _)
            | AvgPoolAdjoint(a, _)
            | Scatter(a, _)
            | Gather(a, _)
            | ReduceMeanHw(a)
            | SumTo(a)
            | BroadcastTo(a)
            | Narrow(a, _)
            | Embed(a, _)
            | Reshape(a) => vec![a],
            Concat(parts) => parts.iter().collect(),
        }
    }
}

struct Node<T: Real> {
    id: usize,
    value: Tensor<T>,
    requires_grad: bool,
    op: Option<Op<T>>,
}

/// A tensor-valued node in the computation graph. Cloning is cheap.
#[derive(Clone)]
pub struct Var<T: Real>(Rc<Node<T>>);

impl<T: Real> core::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "Var#{}({:?})", self.0.id, self.0.value)
    }
}

fn be<T>(r: Result<T>) -> T {
    r.expect("backward shapes are consistent by construction")
}

impl<T: Real> Var<T> {
    fn make(value: Tensor<T>, requires_grad: bool, op: Option<Op<T>>) -> Self {
        let id = NEXT_ID.fetch_add(1, Ordering::Relaxed);
        Var(Rc::new(Node { id, value, requires_grad, op }))
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn param(value: Tensor<T>) -> Self {
        Self::make(value, true, None)
    }

    /// Constant leaf: never receives gradients.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::make(value, false, None)
    }

    pub fn scalar(v: T) -> Self {
        Self::constant(Tensor::scalar(v))
    }

    fn from_op(value: Tensor<T>, op: Op<T>) -> Self {
        let track = op.parents().iter().any(|p| p.0.requires_grad);
        if track {
            Self::make(value, true, Some(op))
        } else {
            Self::make(value, false, None)
        }
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> Shape {
        self.0.value.shape()
    }

    pub fn item(&self) -> T {
        self.0.value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&self, o: &Var<T>) -> Result<Var<T>> {
        let v = self.value().zip_with(o.value(), "add", |a, b| a + b)?;
        Ok(Self::from_op(v, Op::Add(self.clone(), o.clone())))
    }

    pub fn sub(&self, o: &Var<T>) -> Result<Var<T>> {
        let v = self.value().zip_with(o.value(), "sub", |a, b| a - b)?;
        Ok(Self::from_op(v, Op::Sub(self.clone(), o.clone())))
    }

    pub fn mul(&self, o: &Var<T>) -> Result<Var<T>> {
        let v = self.value().zip_with(o.value(), "mul", |a, b| a * b)?;
        Ok(Self::from_op(v, Op::Mul(self.clone(), o.clone())))
    }

    pub fn div(&self, o: &Var<T>) -> Result<Var<T>> {
        let v = self.value().zip_with(o.value(), "div", |a, b| a / b)?;
        Ok(Self::from_op(v, Op::Div(self.clone(), o.clone())))
    }

    pub fn add_scalar(&self, s: T) -> Var<T> {
        Self::from_op(self.value().map(|a| a + s), Op::AddScalar(self.clone()))
    }

    pub fn mul_scalar(&self, s: T) -> Var<T> {
        Self::from_op(self.value().map(|a| a * s), Op::MulScalar(self.clone(), s))
    }

    pub fn neg(&self) -> Var<T> {
        self.mul_scalar(-T::one())
    }

    pub fn square(&self) -> Var<T> {
        be(self.mul(self))
    }

    pub fn sqrt(&self) -> Var<T> {
        Self::from_op(self.value().map(|a| a.sqrt()), Op::Sqrt(self.clone()))
    }

    pub fn tanh(&self) -> Var<T> {
        Self::from_op(self.value().map(|a| a.tanh()), Op::Tanh(self.clone()))
    }

    fn mask_mul(&self, mask: Arc<Tensor<T>>) -> Var<T> {
        let v = be(self.value().zip_with(&mask, "mask_mul", |a, m| a * m));
        Self::from_op(v, Op::MaskMul(self.clone(), mask))
    }

    /// Multiply by a slope chosen per element from the sign of `self`.
    fn piecewise_linear(&self, pos: T, neg: T) -> Var<T> {
        let mask = self.value().map(|a| if a > T::zero() { pos } else { neg });
        self.mask_mul(Arc::new(mask))
    }

    pub fn relu(&self) -> Var<T> {
        self.piecewise_linear(T::one(), T::zero())
    }

    pub fn leaky_relu(&self, slope: T) -> Var<T> {
        self.piecewise_linear(T::one(), slope)
    }

    pub fn abs(&self) -> Var<T> {
        self.piecewise_linear(T::one(), -T::one())
    }

    /// Clamp to `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&self, lo: T, hi: T) -> Var<T> {
        let value = self.value().map(|a| a.max(lo).min(hi));
        let mask = self.value().map(|a| if a < lo || a > hi { T::zero() } else { T::one() });
        let mask = Arc::new(mask);
        // value = self·mask + (clamped constant)·(1 − mask)
        let passthrough = self.mask_mul(mask.clone());
        let held = Tensor::from_vec(
            value.shape(),
            value.data().iter().zip(mask.data()).map(|(&v, &m)| v * (T::one() - m)).collect(),
        );
        be(passthrough.add(&Var::constant(held)))
    }

    // ---- convolution -------------------------------------------------------

    pub fn conv2d(&self, w: &Var<T>, stride: usize, pad: usize) -> Result<Var<T>> {
        let s = self.shape();
        let g = ConvGeom::new(s.h(), s.w(), w.shape().h(), stride, pad)?;
        self.conv_with(w, g)
    }

    pub(crate) fn conv_with(&self, w: &Var<T>, g: ConvGeom) -> Result<Var<T>> {
        let v = kernels::conv(self.value(), w.value(), &g)?;
        Ok(Self::from_op(v, Op::Conv(self.clone(), w.clone(), g)))
    }

    /// Transposed convolution with weight `[c_in, c_out, k, k]` producing an
    /// `out_h × out_w` map.
    pub fn conv_transpose2d(&self, w: &Var<T>, stride: usize, pad: usize, out_h: usize, out_w: usize) -> Result<Var<T>> {
        let s = self.shape();
        let g = ConvGeom::transposed(s.h(), s.w(), out_h, out_w, w.shape().h(), stride, pad)?;
        self.conv_input_with(w, g)
    }

    fn conv_input_with(&self, w: &Var<T>, g: ConvGeom) -> Result<Var<T>> {
        let v = kernels::conv_input(self.value(), w.value(), &g)?;
        Ok(Self::from_op(v, Op::ConvInput(self.clone(), w.clone(), g)))
    }

    fn conv_weight_with(x: &Var<T>, y: &Var<T>, g: ConvGeom) -> Result<Var<T>> {
        let v = kernels::conv_weight(x.value(), y.value(), &g)?;
        Ok(Self::from_op(v, Op::ConvWeight(x.clone(), y.clone(), g)))
    }

    // ---- pooling / reductions ---------------------------------------------

    pub fn avg_pool2d(&self, kh: usize, kw: usize, sh: usize, sw: usize) -> Result<Var<T>> {
        let s = self.shape();
        let g = PoolGeom::new(s.h(), s.w(), kh, kw, sh, sw)?;
        self.avg_pool_with(g)
    }

    fn avg_pool_with(&self, g: PoolGeom) -> Result<Var<T>> {
        let v = kernels::avg_pool(self.value(), &g)?;
        Ok(Self::from_op(v, Op::AvgPool(self.clone(), g)))
    }

    fn avg_pool_adjoint_with(&self, g: PoolGeom) -> Result<Var<T>> {
        let v = kernels::avg_pool_adjoint(self.value(), &g)?;
        Ok(Self::from_op(v, Op::AvgPoolAdjoint(self.clone(), g)))
    }

    pub fn max_pool2d(&self, k: usize, stride: usize) -> Result<Var<T>> {
        let s = self.shape();
        let g = PoolGeom::new(s.h(), s.w(), k, k, stride, stride)?;
        let (v, idx) = kernels::max_pool(self.value(), &g)?;
        Ok(Self::from_op(v, Op::Gather(self.clone(), Arc::new(idx))))
    }

    fn scatter(&self, idx: Arc<Vec<u32>>, into: Shape) -> Var<T> {
        Self::from_op(kernels::scatter_planes(self.value(), &idx, into), Op::Scatter(self.clone(), idx))
    }

    fn gather(&self, idx: Arc<Vec<u32>>, out: Shape) -> Var<T> {
        Self::from_op(kernels::gather_planes(self.value(), &idx, out), Op::Gather(self.clone(), idx))
    }

    /// Per-(sample, channel) spatial mean via an axis reduction.
    pub fn reduce_mean_hw(&self) -> Var<T> {
        Self::from_op(kernels::reduce_mean_hw(self.value()), Op::ReduceMeanHw(self.clone()))
    }

    pub fn sum_to(&self, target: Shape) -> Result<Var<T>> {
        if self.shape() == target {
            return Ok(self.clone());
        }
        Ok(Self::from_op(self.value().sum_to(target)?, Op::SumTo(self.clone())))
    }

    pub fn broadcast_to(&self, target: Shape) -> Result<Var<T>> {
        if self.shape() == target {
            return Ok(self.clone());
        }
        Ok(Self::from_op(self.value().broadcast_to(target)?, Op::BroadcastTo(self.clone())))
    }

    pub fn sum_all(&self) -> Var<T> {
        be(self.sum_to(Shape::SCALAR))
    }

    pub fn mean_all(&self) -> Var<T> {
        let n = self.value().numel();
        self.sum_all().mul_scalar(T::one() / T::lit(n as f64))
    }

    // ---- layout ------------------------------------------------------------

    pub fn concat_channels(parts: &[Var<T>]) -> Result<Var<T>> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let v = Tensor::concat_channels(&vals)?;
        Ok(Self::from_op(v, Op::Concat(parts.to_vec())))
    }

    pub fn narrow_channels(&self, start: usize, len: usize) -> Result<Var<T>> {
        let v = self.value().narrow_channels(start, len)?;
        Ok(Self::from_op(v, Op::Narrow(self.clone(), start)))
    }

    fn embed_channels(&self, total: usize, start: usize) -> Result<Var<T>> {
        let v = self.value().embed_channels(total, start)?;
        Ok(Self::from_op(v, Op::Embed(self.clone(), start)))
    }

    pub fn reshape(&self, shape: Shape) -> Result<Var<T>> {
        if shape == self.shape() {
            return Ok(self.clone());
        }
        Ok(Self::from_op(self.value().reshape(shape)?, Op::Reshape(self.clone())))
    }

    // ---- graph inspection --------------------------------------------------

    /// Categories of every operation reachable from this node (leaves included).
    pub fn op_categories(&self) -> BTreeSet<OpCategory> {
        let mut seen = BTreeSet::new();
        let mut cats = BTreeSet::new();
        let mut stack = vec![self.clone()];
        while let Some(v) = stack.pop() {
            if !seen.insert(v.id()) {
                continue;
            }
            match &v.0.op {
                None => {
                    cats.insert(OpCategory::Leaf);
                }
                Some(op) => {
                    cats.insert(op.category());
                    stack.extend(op.parents().into_iter().cloned());
                }
            }
        }
        cats
    }

    // ---- differentiation ---------------------------------------------------

    /// Gradients of this (scalar) node with respect to all tracked leaves.
    pub fn backward(&self) -> Gradients<T> {
        backprop(self, None, false)
    }

    fn local_grads(&self, g: &Var<T>, create: bool) -> Vec<Option<Var<T>>> {
        let op = self.0.op.as_ref().expect("interior node");
        let keep = |v: &Var<T>| if create { v.clone() } else { v.detach() };
        let out = keep(self);
        let sum_to = |g: Var<T>, like: &Var<T>| be(g.sum_to(like.shape()));
        use Op::*;
        match op {
            Add(a, b) => vec![Some(sum_to(g.clone(), a)), Some(sum_to(g.clone(), b))],
            Sub(a, b) => vec![Some(sum_to(g.clone(), a)), Some(sum_to(g.neg(), b))],
            Mul(a, b) => {
                let (ka, kb) = (keep(a), keep(b));
                vec![Some(sum_to(be(g.mul(&kb)), a)), Some(sum_to(be(g.mul(&ka)), b))]
            }
            Div(a, b) => {
                let kb = keep(b);
                let ga = be(g.div(&kb));
                let gb = be(ga.mul(&out)).neg();
                vec![Some(sum_to(ga, a)), Some(sum_to(gb, b))]
            }
            AddScalar(_) => vec![Some(g.clone())],
            MulScalar(_, s) => vec![Some(g.mul_scalar(*s))],
            Sqrt(_) => vec![Some(be(g.div(&out)).mul_scalar(T::lit(0.5)))],
            Tanh(_) => {
                let d = out.square().neg().add_scalar(T::one());
                vec![Some(be(g.mul(&d)))]
            }
            MaskMul(_, m) => vec![Some(g.mask_mul(m.clone()))],
            Conv(x, w, geom) => {
                let gx = be(g.conv_input_with(&keep(w), *geom));
                let gw = be(Var::conv_weight_with(&keep(x), g, *geom));
                vec![Some(gx), Some(gw)]
            }
            ConvInput(y, w, geom) => {
                let gy = be(g.conv_with(&keep(w), *geom));
                let gw = be(Var::conv_weight_with(g, &keep(y), *geom));
                vec![Some(gy), Some(gw)]
            }
            ConvWeight(x, y, geom) => {
                let gx = be(keep(y).conv_input_with(g, *geom));
                let gy = be(keep(x).conv_with(g, *geom));
                vec![Some(gx), Some(gy)]
            }
            AvgPool(_, geom) => vec![Some(be(g.avg_pool_adjoint_with(*geom)))],
            AvgPoolAdjoint(_, geom) => vec![Some(be(g.avg_pool_with(*geom)))],
            Gather(a, idx) => vec![Some(g.scatter(idx.clone(), a.shape()))],
            Scatter(a, idx) => vec![Some(g.gather(idx.clone(), a.shape()))],
            ReduceMeanHw(a) => {
                let s = a.shape();
                vec![Some(be(g.broadcast_to(s)).mul_scalar(T::one() / T::lit(s.hw() as f64)))]
            }
            SumTo(a) => vec![Some(be(g.broadcast_to(a.shape())))],
            BroadcastTo(a) => vec![Some(sum_to(g.clone(), a))],
            Concat(parts) => {
                let mut start = 0;
                parts
                    .iter()
                    .map(|p| {
                        let c = p.shape().c();
                        let r = be(g.narrow_channels(start, c));
                        start += c;
                        Some(r)
                    })
                    .collect()
            }
            Narrow(a, start) => vec![Some(be(g.embed_channels(a.shape().c(), *start)))],
            Embed(a, start) => vec![Some(be(g.narrow_channels(*start, a.shape().c())))],
            Reshape(a) => vec![Some(be(g.reshape(a.shape())))],
        }
    }
}

/// Gradients with respect to the leaves reached by a backward pass.
pub struct Gradients<T: Real> {
    grads: BTreeMap<usize, Var<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: &Var<T>) -> Option<&Tensor<T>> {
        self.grads.get(&v.id()).map(|g| g.value())
    }

    pub fn get_var(&self, v: &Var<T>) -> Option<&Var<T>> {
        self.grads.get(&v.id())
    }
}

/// Gradients of `output` with respect to `inputs`. With `create_graph`, the
/// returned gradients are themselves differentiable. Inputs the output does
/// not depend on yield zero tensors.
pub fn grad<T: Real>(output: &Var<T>, inputs: &[&Var<T>], create_graph: bool) -> Result<Vec<Var<T>>> {
    if output.value().numel() != 1 {
        return Err(Error::InvalidShape { op: "grad", reason: alloc::format!("output {} is not scalar", output.shape()) });
    }
    let targets: BTreeSet<usize> = inputs.iter().map(|v| v.id()).collect();
    let g = backprop(output, Some(&targets), create_graph);
    Ok(inputs
        .iter()
        .map(|v| g.grads.get(&v.id()).cloned().unwrap_or_else(|| Var::constant(Tensor::zeros(v.shape()))))
        .collect())
}

fn backprop<T: Real>(output: &Var<T>, targets: Option<&BTreeSet<usize>>, create: bool) -> Gradients<T> {
    let mut grads: BTreeMap<usize, Var<T>> = BTreeMap::new();
    if !output.requires_grad() {
        return Gradients { grads };
    }
    // Collect reachable tracked nodes.
    let mut nodes: BTreeMap<usize, Var<T>> = BTreeMap::new();
    let mut stack = vec![output.clone()];
    while let Some(v) = stack.pop() {
        if !v.requires_grad() || nodes.contains_key(&v.id()) {
            continue;
        }
        if let Some(op) = &v.0.op {
            stack.extend(op.parents().into_iter().cloned());
        }
        nodes.insert(v.id(), v);
    }
    // Restrict to nodes from which a target is reachable (ascending id order
    // visits parents first).
    let relevant: BTreeSet<usize> = match targets {
        None => nodes.keys().copied().collect(),
        Some(t) => {
            let mut rel = BTreeSet::new();
            for (id, v) in &nodes {
                let hit = t.contains(id)
                    || v.0.op.as_ref().is_some_and(|op| op.parents().iter().any(|p| rel.contains(&p.id())));
                if hit {
                    rel.insert(*id);
                }
            }
            rel
        }
    };
    let seed = Tensor::full(output.shape(), T::one());
    grads.insert(output.id(), Var::constant(seed));
    for (id, v) in nodes.iter().rev() {
        if !relevant.contains(id) {
            continue;
        }
        let Some(op) = &v.0.op else { continue };
        let Some(g) = grads.get(id).cloned() else { continue };
        let g = if create { g } else { g.detach() };
        let locals = v.local_grads(&g, create);
        for (p, gp) in op.parents().into_iter().zip(locals) {
            let Some(gp) = gp else { continue };
            if !p.requires_grad() || !relevant.contains(&p.id()) {
                continue;
            }
            let acc = match grads.remove(&p.id()) {
                Some(prev) => be(prev.add(&gp)),
                None => gp,
            };
            grads.insert(p.id(), acc);
        }
        // Interior gradients are no longer needed once propagated.
        if v.0.op.is_some() && targets.is_none_or(|t| !t.contains(id)) {
            grads.remove(id);
        }
    }
    if let Some(t) = targets {
        grads.retain(|id, _| t.contains(id));
    } else {
        grads.retain(|id, _| nodes.get(id).is_some_and(|v| v.0.op.is_none()));
    }
    Gradients { grads }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(shape: [usize; 4], data: &[f64]) -> Var<f64> {
        Var::param(Tensor::new(shape, data.to_vec()).unwrap())
    }

    #[test]
    fn product_rule_and_broadcast_reduction() {
        let a = v([1, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = v([1, 2, 1, 1], &[10.0, 20.0]);
        let y = a.mul(&b).unwrap().sum_all();
        assert_eq!(y.item(), 10.0 + 20.0 + 60.0 + 80.0);
        let g = y.backward();
        assert_eq!(g.get(&a).unwrap().data(), &[10.0, 10.0, 20.0, 20.0]);
        assert_eq!(g.get(&b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn quotient_and_sqrt() {
        let a = v([1, 1, 1, 1], &[3.0]);
        let b = v([1, 1, 1, 1], &[4.0]);
        let y = a.div(&b).unwrap().sqrt();
        let g = y.backward();
        // y = sqrt(a/b); dy/da = 1/(2 sqrt(a b)), dy/db = -sqrt(a)/(2 b^{3/2})
        assert!((g.get(&a).unwrap().item() - 1.0 / (2.0 * 12f64.sqrt())).abs() < 1e-12);
        assert!((g.get(&b).unwrap().item() + 3f64.sqrt() / (2.0 * 8.0)).abs() < 1e-12);
    }

    #[test]
    fn second_order_through_square() {
        // f(x) = sum(x^3); df/dx = 3x^2; d/dx sum(df/dx) = 6x
        let x = v([1, 1, 1, 3], &[1.0, -2.0, 0.5]);
        let f = x.square().mul(&x).unwrap().sum_all();
        let gx = grad(&f, &[&x], true).unwrap().remove(0);
        assert_eq!(gx.value().data(), &[3.0, 12.0, 0.75]);
        let h = gx.sum_all().backward();
        assert_eq!(h.get(&x).unwrap().data(), &[6.0, -12.0, 3.0]);
    }

    #[test]
    fn second_order_through_conv() {
        // f(x, w) = ||conv(x, w)||² has df/dx = 2 conv_input(conv(x,w), w); its
        // sum's gradient wrt w is checked against central differences.
        let x = Var::constant(Tensor::from_fn([1, 2, 5, 5], |[_, c, h, w]| ((c * 25 + h * 5 + w) as f64 * 0.37).sin()));
        let w0 = Tensor::from_fn([3, 2, 3, 3], |[o, c, h, w]| ((o * 18 + c * 9 + h * 3 + w) as f64 * 0.71).cos() * 0.3);
        let xi = Var::param(x.value().clone());
        let objective = |w: &Var<f64>| -> Var<f64> {
            let f = xi.conv2d(w, 2, 1).unwrap().square().sum_all();
            let gx = grad(&f, &[&xi], true).unwrap().remove(0);
            gx.square().sum_all()
        };
        let w = Var::param(w0.clone());
        let analytic = objective(&w).backward().get(&w).unwrap().clone();
        let h = 1e-6;
        for &i in &[0usize, 7, 20, 40, 53] {
            let bump = |d: f64| {
                let mut data = w0.to_vec();
                data[i] += d;
                objective(&Var::param(Tensor::new(w0.shape(), data).unwrap())).item()
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!((a - fd).abs() <= 1e-6 * (1.0 + a.abs()), "idx {i}: {a} vs {fd}");
        }
    }

    #[test]
    fn categories_are_recorded() {
        let x = v([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = x.avg_pool2d(2, 2, 2, 2).unwrap().add_scalar(1.0);
        let cats = y.op_categories();
        assert!(cats.contains(&OpCategory::Pooling) && cats.contains(&OpCategory::Elementwise));
        assert!(!cats.contains(&OpCategory::Reduction));
        assert!(x.reduce_mean_hw().op_categories().contains(&OpCategory::Reduction));
    }

    #[test]
    fn constants_do_not_record_graph() {
        let x = Var::constant(Tensor::<f32>::full([1, 1, 2, 2], 1.0));
        let y = x.add_scalar(1.0).relu();
        assert!(!y.requires_grad());
        assert_eq!(y.op_categories().len(), 1);
    }
}
