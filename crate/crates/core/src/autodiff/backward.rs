//! Reverse sweep. Every vector-Jacobian rule below is written with graph
//! primitives, so the sweep itself is differentiable.

use std::collections::HashMap;

use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

impl<T: Real> Graph<T> {
    /// Gradients of the scalar `loss` with respect to each of `wrt`.
    ///
    /// With `create_graph`, the returned gradients are differentiable graph
    /// nodes; otherwise they are constants. A `wrt` entry that does not
    /// influence `loss` gets a zero tensor of its own shape.
    pub fn grad(&mut self, loss: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "grad needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let seed = Tensor::ones(self.shape(loss).to_vec());
        let seed = self.constant(seed);
        self.backward(loss, seed, wrt, create_graph)
    }

    /// Vector-Jacobian product: `seed^T d(out)/d(wrt)` for each `wrt`.
    pub fn backward(&mut self, out: Var, seed: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        if self.shape(seed) != self.shape(out) {
            return Err(Error::InvalidArgument(format!(
                "seed shape {:?} does not match output {:?}",
                self.shape(seed),
                self.shape(out)
            )));
        }
        let zeros = |g: &mut Self, w: Var| {
            let z = Tensor::zeros(g.shape(w).to_vec());
            g.constant(z)
        };
        let Some(lo) = wrt.iter().map(|w| w.0).filter(|&w| w <= out.0).min() else {
            return Ok(wrt.iter().map(|&w| zeros(self, w)).collect());
        };

        // Nodes reachable from a differentiable wrt entry...
        let span = out.0 + 1 - lo;
        let mut reach = vec![false; span];
        for w in wrt {
            if w.0 <= out.0 && !self.nodes[w.0].frozen {
                reach[w.0 - lo] = true;
            }
        }
        for id in lo..=out.0 {
            let n = &self.nodes[id];
            if !reach[id - lo] && !n.frozen {
                reach[id - lo] = n.inputs.iter().any(|i| i.0 >= lo && reach[i.0 - lo]);
            }
        }
        // ...that also feed `out`.
        let mut needed = vec![false; span];
        needed[span - 1] = reach[span - 1];
        for id in (lo..=out.0).rev() {
            if needed[id - lo] {
                for i in &self.nodes[id].inputs {
                    if i.0 >= lo && reach[i.0 - lo] {
                        needed[i.0 - lo] = true;
                    }
                }
            }
        }

        let saved = self.no_grad;
        self.no_grad = saved || !create_graph;
        let result = self.sweep(out.0, seed, lo, &|id| id >= lo && needed[id - lo]);
        self.no_grad = saved;
        let grads = result?;

        Ok(wrt
            .iter()
            .map(|&w| match grads.get(&w.0) {
                Some(&g) if w.0 <= out.0 && needed[w.0 - lo] => g,
                _ => zeros(self, w),
            })
            .collect())
    }

    /// Propagates `seed` from node `out` down to `lo`, visiting only nodes
    /// for which `needed` holds. Returns accumulated gradients by node id,
    /// including needed inputs below `lo`.
    fn sweep(
        &mut self,
        out: usize,
        seed: Var,
        lo: usize,
        needed: &dyn Fn(usize) -> bool,
    ) -> Result<HashMap<usize, Var>> {
        let mut grads: HashMap<usize, Var> = HashMap::new();
        grads.insert(out, seed);
        for id in (lo..=out).rev() {
            if !needed(id) {
                continue;
            }
            let Some(&g) = grads.get(&id) else { continue };
            let inputs = self.nodes[id].inputs.clone();
            if inputs.is_empty() {
                continue;
            }
            let need: Vec<bool> = inputs.iter().map(|v| needed(v.0)).collect();
            if !need.iter().any(|&b| b) {
                continue;
            }
            let contributions = self.vjp(id, g, &need)?;
            for ((input, contrib), wanted) in inputs.iter().zip(contributions).zip(need) {
                let Some(c) = contrib else { continue };
                if !wanted {
                    continue;
                }
                let acc = match grads.get(&input.0) {
                    Some(&prev) => self.add(prev, c)?,
                    None => c,
                };
                grads.insert(input.0, acc);
            }
        }
        Ok(grads)
    }

    /// Vector-Jacobian rule of node `id` given upstream gradient `g`.
    fn vjp(&mut self, id: usize, g: Var, need: &[bool]) -> Result<Vec<Option<Var>>> {
        let op = self.nodes[id].op.clone();
        let inputs = self.nodes[id].inputs.clone();
        let y = Var(id);
        let one = T::one();
        let want = |i: usize| need.get(i).copied().unwrap_or(false);

        let out = match op {
            Op::Leaf | Op::InsideMask | Op::LeMask => vec![None; inputs.len()],
            Op::Add => vec![Some(g), Some(g)],
            Op::Sub => {
                let gb = if want(1) { Some(self.neg(g)) } else { None };
                vec![Some(g), gb]
            }
            Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                let ga = if want(0) { Some(self.mul(g, b)?) } else { None };
                let gb = if want(1) { Some(self.mul(g, a)?) } else { None };
                vec![ga, gb]
            }
            Op::Div => {
                let b = inputs[1];
                let ga = if want(0) { Some(self.div(g, b)?) } else { None };
                let gb = if want(1) {
                    // d(a/b)/db = -(a/b)/b
                    let gy = self.mul(g, y)?;
                    let q = self.div(gy, b)?;
                    Some(self.neg(q))
                } else {
                    None
                };
                vec![ga, gb]
            }
            Op::Affine { scale, .. } => vec![Some(self.scale(g, scale))],
            Op::Square => {
                let two_x = self.scale(inputs[0], T::of(2.0));
                vec![Some(self.mul(g, two_x)?)]
            }
            Op::Sqrt => {
                let half = self.scale(g, T::of(0.5));
                vec![Some(self.div(half, y)?)]
            }
            Op::Exp => vec![Some(self.mul(g, y)?)],
            Op::Log => vec![Some(self.div(g, inputs[0])?)],
            Op::Recip => {
                let y2 = self.square(y);
                let gy2 = self.mul(g, y2)?;
                vec![Some(self.neg(gy2))]
            }
            Op::Sigmoid => {
                let one_minus = self.affine(y, -one, one);
                let d = self.mul(y, one_minus)?;
                vec![Some(self.mul(g, d)?)]
            }
            Op::Tanh => {
                let y2 = self.square(y);
                let d = self.affine(y2, -one, one);
                vec![Some(self.mul(g, d)?)]
            }
            Op::Swish => {
                // d/dx x*s(x) = s + y*(1 - s)
                let s = self.sigmoid(inputs[0]);
                let one_minus = self.affine(s, -one, one);
                let t = self.mul(y, one_minus)?;
                let d = self.add(s, t)?;
                vec![Some(self.mul(g, d)?)]
            }
            Op::Huber { delta } => {
                let d = self.clip(inputs[0], -delta, delta)?;
                vec![Some(self.mul(g, d)?)]
            }
            Op::Clip { lo, hi } => {
                let m = self.inside_mask(inputs[0], lo, hi);
                vec![Some(self.mul(g, m)?)]
            }
            Op::Min => {
                let m = self.le_mask(inputs[0], inputs[1])?;
                let ga = self.mul(g, m)?;
                let gb = if want(1) { Some(self.sub(g, ga)?) } else { None };
                vec![Some(ga), gb]
            }
            Op::MatMul { ta, tb } => {
                let (a, b) = (inputs[0], inputs[1]);
                let ga = if want(0) {
                    Some(if ta {
                        self.matmul_t(b, g, tb, true)?
                    } else {
                        self.matmul_t(g, b, false, !tb)?
                    })
                } else {
                    None
                };
                let gb = if want(1) {
                    Some(if tb {
                        self.matmul_t(g, a, true, ta)?
                    } else {
                        self.matmul_t(a, g, !ta, false)?
                    })
                } else {
                    None
                };
                vec![ga, gb]
            }
            Op::Conv2d { stride } => {
                let (x, w) = (inputs[0], inputs[1]);
                let gx = if want(0) {
                    let xs = self.shape(x).to_vec();
                    Some(self.conv2d_input_grad(g, w, &xs, stride)?)
                } else {
                    None
                };
                let gw = if want(1) {
                    let ws = self.shape(w).to_vec();
                    Some(self.conv2d_weight_grad(x, g, &ws, stride)?)
                } else {
                    None
                };
                vec![gx, gw]
            }
            Op::Conv2dInputGrad { stride } => {
                // y = C^T(gy, w) is bilinear; its adjoints are conv2d and the
                // weight gradient.
                let (gy, w) = (inputs[0], inputs[1]);
                let d_gy = if want(0) { Some(self.conv2d(g, w, stride)?) } else { None };
                let d_w = if want(1) {
                    let ws = self.shape(w).to_vec();
                    Some(self.conv2d_weight_grad(g, gy, &ws, stride)?)
                } else {
                    None
                };
                vec![d_gy, d_w]
            }
            Op::Conv2dWeightGrad { stride } => {
                let (x, gy) = (inputs[0], inputs[1]);
                let d_x = if want(0) {
                    let xs = self.shape(x).to_vec();
                    Some(self.conv2d_input_grad(gy, g, &xs, stride)?)
                } else {
                    None
                };
                let d_gy = if want(1) { Some(self.conv2d(x, g, stride)?) } else { None };
                vec![d_x, d_gy]
            }
            Op::Reshape => {
                let s = self.shape(inputs[0]).to_vec();
                vec![Some(self.reshape(g, &s)?)]
            }
            Op::Concat { axis } => {
                let mut start = 0;
                let mut parts = Vec::with_capacity(inputs.len());
                for (i, &inp) in inputs.iter().enumerate() {
                    let len = self.shape(inp)[axis];
                    parts.push(if want(i) { Some(self.slice(g, axis, start, len)?) } else { None });
                    start += len;
                }
                parts
            }
            Op::Slice { axis, start } => {
                let total = self.shape(inputs[0])[axis];
                vec![Some(self.pad(g, axis, start, total)?)]
            }
            Op::Pad { axis, before } => {
                let len = self.shape(inputs[0])[axis];
                vec![Some(self.slice(g, axis, before, len)?)]
            }
            Op::Sum | Op::Mean => {
                let s = self.shape(inputs[0]).to_vec();
                let ones = vec![1; s.len()];
                let g1 = self.reshape(g, &ones)?;
                let b = self.broadcast(g1, &s)?;
                if matches!(op, Op::Mean) {
                    let n = crate::tensor::numel(&s).max(1);
                    vec![Some(self.scale(b, one / T::of(n as f64)))]
                } else {
                    vec![Some(b)]
                }
            }
            Op::SumTo => {
                let s = self.shape(inputs[0]).to_vec();
                vec![Some(self.broadcast(g, &s)?)]
            }
            Op::Broadcast => {
                let s = self.shape(inputs[0]).to_vec();
                vec![Some(self.sum_to(g, &s)?)]
            }
            Op::LayerNorm { eps } => vec![Some(self.layer_norm_grad(inputs[0], g, eps)?)],
            Op::LayerNormGrad { eps } => {
                let (x, gy) = (inputs[0], inputs[1]);
                let d_x = if want(0) {
                    Some(self.layer_norm_grad_wrt_x(x, gy, g, eps)?)
                } else {
                    None
                };
                // The layer-norm Jacobian is symmetric, so the map gy -> dx
                // is self-adjoint.
                let d_gy = if want(1) { Some(self.layer_norm_grad(x, g, eps)?) } else { None };
                vec![d_x, d_gy]
            }
        };
        debug_assert_eq!(out.len(), inputs.len());
        Ok(out)
    }

    /// Derivative of `layer_norm_grad(x, gy)` with respect to `x`, contracted
    /// with `upstream`. Rebuilds the backward rule from elementary primitives
    /// and sweeps that local subgraph only.
    fn layer_norm_grad_wrt_x(&mut self, x: Var, gy: Var, upstream: Var, eps: T) -> Result<Var> {
        let mark = self.len();
        let shape = self.shape(x).to_vec();
        let bc = |g: &mut Self, v: Var| g.broadcast(v, &shape);

        let mu = self.mean_last(x)?;
        let mu = bc(self, mu)?;
        let c = self.sub(x, mu)?;
        let c2 = self.square(c);
        let var = self.mean_last(c2)?;
        let var_eps = self.affine(var, T::one(), eps);
        let sd = self.sqrt(var_eps);
        let r = self.recip(sd);
        let r = bc(self, r)?;
        let y = self.mul(c, r)?;
        let g_mean = self.mean_last(gy)?;
        let g_mean = bc(self, g_mean)?;
        let gyy = self.mul(gy, y)?;
        let m = self.mean_last(gyy)?;
        let m = bc(self, m)?;
        let centered = self.sub(gy, g_mean)?;
        let ym = self.mul(y, m)?;
        let inner = self.sub(centered, ym)?;
        let out = self.mul(r, inner)?;

        let grads = self.sweep(out.0, upstream, mark, &|id| id >= mark || id == x.0)?;
        match grads.get(&x.0) {
            Some(&g) => Ok(g),
            None => Ok(self.constant(Tensor::zeros(shape.clone()))),
        }
    }
}
