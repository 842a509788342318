//! Reverse-mode automatic differentiation over an explicit, append-only
//! computation graph.
//!
//! Every primitive computes its value eagerly when it is recorded. The
//! reverse sweep expresses each vector-Jacobian product with the same
//! primitives, so gradients are ordinary graph nodes and can be
//! differentiated again (`create_graph = true`). This is what lets the
//! imitation loss be differentiated through the inner planning updates.
//!
//! ```
//! use upn::autodiff::Graph;
//! use upn::tensor::Tensor;
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.variable(Tensor::scalar(2.0));
//! let x2 = g.mul(x, x).unwrap();
//! let x3 = g.mul(x2, x).unwrap();
//! let dx = g.grad(x3, &[x], true).unwrap()[0];
//! let ddx = g.grad(dx, &[x], false).unwrap()[0];
//! assert_eq!(g.value(dx).item(), 12.0);
//! assert_eq!(g.value(ddx).item(), 12.0);
//! ```

mod backward;
pub mod check;
pub mod kernels;

use crate::error::{Error, Result};
use crate::tensor::{numel, Real, Tensor};
use kernels::ConvGeom;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The primitive catalog. Output shapes live on the node, so ops whose
/// result shape is not implied by their inputs (reshape, broadcast, the
/// convolution adjoints) carry no extra attributes.
#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Affine { scale: T },
    Square,
    Sqrt,
    Exp,
    Log,
    Recip,
    Sigmoid,
    Tanh,
    Swish,
    Huber { delta: T },
    Clip { lo: T, hi: T },
    Min,
    MatMul { ta: bool, tb: bool },
    Conv2d { stride: usize },
    Conv2dInputGrad { stride: usize },
    Conv2dWeightGrad { stride: usize },
    Reshape,
    Concat { axis: usize },
    Slice { axis: usize, start: usize },
    Pad { axis: usize, before: usize },
    Sum,
    Mean,
    SumTo,
    Broadcast,
    LayerNorm { eps: T },
    LayerNormGrad { eps: T },
    /// 1 where `lo < x < hi`, else 0. Piecewise constant.
    InsideMask,
    /// 1 where `a <= b`, else 0. Piecewise constant.
    LeMask,
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Affine { .. } => "affine",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Recip => "recip",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Swish => "swish",
            Op::Huber { .. } => "huber",
            Op::Clip { .. } => "clip_by_value",
            Op::Min => "min",
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Conv2dInputGrad { .. } => "conv2d_input_grad",
            Op::Conv2dWeightGrad { .. } => "conv2d_weight_grad",
            Op::Reshape => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Pad { .. } => "pad",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumTo => "sum_to",
            Op::Broadcast => "broadcast",
            Op::LayerNorm { .. } => "layer_norm",
            Op::LayerNormGrad { .. } => "layer_norm_grad",
            Op::InsideMask => "inside_mask",
            Op::LeMask => "le_mask",
        }
    }

    fn is_piecewise_constant(&self) -> bool {
        matches!(self, Op::InsideMask | Op::LeMask)
    }
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) inputs: Vec<Var>,
    /// No differentiable path from any variable leaf reaches this node.
    pub(crate) frozen: bool,
}

/// An append-only computation graph confined to one thread while in use.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    no_grad: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            no_grad: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded at or after `mark`. Handles to dropped
    /// nodes become invalid.
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    /// A differentiable leaf.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// A leaf that gradients never flow into.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// A constant copy of `x`; gradients stop here.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.clone();
        self.constant(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_frozen(&self, v: Var) -> bool {
        self.nodes[v.0].frozen
    }

    fn push_leaf(&mut self, value: Tensor<T>, frozen: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            inputs: Vec::new(),
            frozen,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: Vec<Var>) -> Var {
        debug_assert_eq!(numel(&shape), data.len(), "{}", op.name());
        let frozen = self.no_grad
            || op.is_piecewise_constant()
            || inputs.iter().all(|v| self.nodes[v.0].frozen);
        let value = Tensor::new(shape, data).expect("kernel output matches shape");
        self.nodes.push(Node {
            value,
            op,
            inputs,
            frozen,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape_err(&self, op: &'static str, detail: String) -> Error {
        Error::Shape {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err(
                op,
                format!("operands {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let shape = xv.shape().to_vec();
        self.push(shape, data, op, vec![x])
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = av.shape().to_vec();
        Ok(self.push(shape, data, op, vec![a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div, |x, y| x / y)
    }

    /// Elementwise minimum.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Min, |x, y| if x <= y { x } else { y })
    }

    pub(crate) fn le_mask(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::LeMask, |x, y| {
            if x <= y {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        self.unary(x, Op::Affine { scale }, |v| scale * v + shift)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.affine(x, s, T::zero())
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -T::one(), T::zero())
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square, |v| v * v)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt, |v| v.sqrt())
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp, |v| v.exp())
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log, |v| v.ln())
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, Op::Recip, |v| v.recip())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid, sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh, |v| v.tanh())
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&mut self, x: Var) -> Var {
        self.unary(x, Op::Swish, |v| v * sigmoid(v))
    }

    /// Elementwise Huber penalty: `z^2/2` for `|z| <= delta`, else
    /// `delta * (|z| - delta/2)`.
    pub fn huber(&mut self, x: Var, delta: T) -> Result<Var> {
        if delta.partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::InvalidArgument(format!("huber delta must be > 0, got {delta}")));
        }
        Ok(self.unary(x, Op::Huber { delta }, |z| huber(z, delta)))
    }

    /// Elementwise clamp to `[lo, hi]`. The gradient is 1 strictly inside
    /// the interval and 0 on or beyond its boundary.
    pub fn clip(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        if lo.partial_cmp(&hi) != Some(std::cmp::Ordering::Less) {
            return Err(Error::InvalidArgument(format!("clip needs lo < hi, got [{lo}, {hi}]")));
        }
        Ok(self.unary(x, Op::Clip { lo, hi }, |v| v.max(lo).min(hi)))
    }

    pub(crate) fn inside_mask(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, Op::InsideMask, |v| {
            if v > lo && v < hi {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) * op(b)` where `op` transposes when the flag is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(self.shape_err("matmul", format!("rank-2 operands required, got {sa:?}, {sb:?}")));
        }
        let ka = if ta { sa[0] } else { sa[1] };
        let kb = if tb { sb[1] } else { sb[0] };
        if ka != kb {
            return Err(self.shape_err(
                "matmul",
                format!("inner dims differ: {sa:?}{} x {sb:?}{}", t_mark(ta), t_mark(tb)),
            ));
        }
        let (data, m, n) = kernels::matmul(
            self.value(a).data(),
            &sa,
            self.value(b).data(),
            &sb,
            ta,
            tb,
        );
        Ok(self.push(vec![m, n], data, Op::MatMul { ta, tb }, vec![a, b]))
    }

    fn conv_geom(&self, op: &'static str, x_shape: &[usize], w_shape: &[usize], stride: usize) -> Result<ConvGeom> {
        ConvGeom::new(x_shape, w_shape, stride).ok_or_else(|| {
            self.shape_err(
                op,
                format!("input {x_shape:?} incompatible with kernel {w_shape:?} at stride {stride}"),
            )
        })
    }

    /// VALID 2-D convolution of `x` (N, C, H, W) with `w` (O, C, kh, kw).
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let geom = self.conv_geom("conv2d", self.shape(x), self.shape(w), stride)?;
        let data = kernels::conv2d(self.value(x).data(), self.value(w).data(), &geom);
        Ok(self.push(geom.out_shape(), data, Op::Conv2d { stride }, vec![x, w]))
    }

    pub(crate) fn conv2d_input_grad(&mut self, gy: Var, w: Var, x_shape: &[usize], stride: usize) -> Result<Var> {
        let geom = self.conv_geom("conv2d_input_grad", x_shape, self.shape(w), stride)?;
        if self.shape(gy) != geom.out_shape().as_slice() {
            return Err(self.shape_err("conv2d_input_grad", format!("upstream {:?}", self.shape(gy))));
        }
        let data = kernels::conv2d_input_grad(self.value(gy).data(), self.value(w).data(), &geom);
        Ok(self.push(x_shape.to_vec(), data, Op::Conv2dInputGrad { stride }, vec![gy, w]))
    }

    pub(crate) fn conv2d_weight_grad(&mut self, x: Var, gy: Var, w_shape: &[usize], stride: usize) -> Result<Var> {
        let geom = self.conv_geom("conv2d_weight_grad", self.shape(x), w_shape, stride)?;
        if self.shape(gy) != geom.out_shape().as_slice() {
            return Err(self.shape_err("conv2d_weight_grad", format!("upstream {:?}", self.shape(gy))));
        }
        let data = kernels::conv2d_weight_grad(self.value(x).data(), self.value(gy).data(), &geom);
        Ok(self.push(w_shape.to_vec(), data, Op::Conv2dWeightGrad { stride }, vec![x, gy]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(self.shape_err("reshape", format!("{:?} -> {:?}", self.shape(x), shape)));
        }
        let data = self.value(x).data().to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape, vec![x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| self.shape_err("concat", "no operands".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(self.shape_err("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(self.shape_err("concat", format!("{s:?} does not align with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base;
        shape[axis] = total;
        let data = {
            let views: Vec<(&[T], &[usize])> = parts
                .iter()
                .map(|&p| (self.value(p).data(), self.shape(p)))
                .collect();
            kernels::concat(&views, axis, &shape)
        };
        Ok(self.push(shape, data, Op::Concat { axis }, parts.to_vec()))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(self.shape_err("slice", format!("[{start}, {}) on axis {axis} of {s:?}", start + len)));
        }
        let data = kernels::slice(self.value(x).data(), &s, axis, start, len);
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push(shape, data, Op::Slice { axis, start }, vec![x]))
    }

    pub(crate) fn pad(&mut self, x: Var, axis: usize, before: usize, total: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || before + s[axis] > total {
            return Err(self.shape_err("pad", format!("{s:?} into {total} at {before}")));
        }
        let data = kernels::pad(self.value(x).data(), &s, axis, before, total);
        let mut shape = s;
        shape[axis] = total;
        Ok(self.push(shape, data, Op::Pad { axis, before }, vec![x]))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Vec::new(), vec![s], Op::Sum, vec![x])
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::of(v.len() as f64);
        self.push(Vec::new(), vec![s], Op::Mean, vec![x])
    }

    /// Sums `x` down to `shape`, which must broadcast back to `x`'s shape.
    pub fn sum_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let from = self.shape(x).to_vec();
        if !kernels::broadcastable(shape, &from) {
            return Err(self.shape_err("sum_to", format!("{from:?} -> {shape:?}")));
        }
        let data = kernels::sum_to(self.value(x).data(), &from, shape);
        Ok(self.push(shape.to_vec(), data, Op::SumTo, vec![x]))
    }

    /// Repeats size-1 axes of `x` to reach `shape` (same rank).
    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let from = self.shape(x).to_vec();
        if !kernels::broadcastable(&from, shape) {
            return Err(self.shape_err("broadcast", format!("{from:?} -> {shape:?}")));
        }
        let data = kernels::broadcast(self.value(x).data(), &from, shape);
        Ok(self.push(shape.to_vec(), data, Op::Broadcast, vec![x]))
    }

    /// Sum over the last axis, keeping it with extent 1.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let mut s = self.shape(x).to_vec();
        match s.last_mut() {
            Some(d) => *d = 1,
            None => return Err(self.shape_err("sum_to", "scalar has no last axis".into())),
        }
        self.sum_to(x, &s)
    }

    /// Mean over the last axis, keeping it with extent 1.
    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&1);
        let s = self.sum_last(x)?;
        Ok(self.scale(s, T::one() / T::of(d as f64)))
    }

    /// Normalizes over the last axis (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s
            .last()
            .ok_or_else(|| self.shape_err("layer_norm", "scalar input".into()))?;
        let data = kernels::layer_norm(self.value(x).data(), d, eps);
        Ok(self.push(s, data, Op::LayerNorm { eps }, vec![x]))
    }

    pub(crate) fn layer_norm_grad(&mut self, x: Var, gy: Var, eps: T) -> Result<Var> {
        self.same_shape("layer_norm_grad", x, gy)?;
        let s = self.shape(x).to_vec();
        let d = *s.last().expect("checked by layer_norm");
        let data = kernels::layer_norm_grad(self.value(x).data(), self.value(gy).data(), d, eps);
        Ok(self.push(s, data, Op::LayerNormGrad { eps }, vec![x, gy]))
    }
}

fn t_mark(t: bool) -> &'static str {
    if t {
        "ᵀ"
    } else {
        ""
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn huber<T: Real>(z: T, delta: T) -> T {
    let a = z.abs();
    if a <= delta {
        T::of(0.5) * z * z
    } else {
        delta * (a - T::of(0.5) * delta)
    }
}

#[cfg(test)]
mod tests;
