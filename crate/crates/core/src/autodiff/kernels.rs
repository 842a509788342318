//! Numeric forward kernels behind the graph primitives.

use crate::tensor::{numel, Real};

/// Row-major strides of `shape`.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Strides into a tensor of shape `small` when indexed by a multi-index of
/// `big`; broadcast axes get stride 0.
fn broadcast_strides(small: &[usize], big: &[usize]) -> Vec<usize> {
    let s = strides(small);
    small
        .iter()
        .zip(big)
        .zip(s)
        .map(|((&a, &b), st)| if a == 1 && b != 1 { 0 } else { st })
        .collect()
}

/// Calls `f(big_index, small_index)` for every element of `big`.
fn for_each_broadcast(small: &[usize], big: &[usize], mut f: impl FnMut(usize, usize)) {
    let total = numel(big);
    if total == 0 {
        return;
    }
    let rank = big.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let bs = broadcast_strides(small, big);
    let mut idx = vec![0usize; rank];
    let mut small_off = 0usize;
    let inner = big[rank - 1];
    let inner_stride = bs[rank - 1];
    let mut big_off = 0usize;
    while big_off < total {
        let mut s = small_off;
        for _ in 0..inner {
            f(big_off, s);
            big_off += 1;
            s += inner_stride;
        }
        // advance the outer odometer
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            small_off += bs[d];
            if idx[d] < big[d] {
                break;
            }
            small_off -= bs[d] * idx[d];
            idx[d] = 0;
        }
    }
}

pub fn broadcast<T: Real>(x: &[T], from: &[usize], to: &[usize]) -> Vec<T> {
    let mut out = vec![T::zero(); numel(to)];
    for_each_broadcast(from, to, |o, i| out[o] = x[i]);
    out
}

pub fn sum_to<T: Real>(x: &[T], from: &[usize], to: &[usize]) -> Vec<T> {
    let mut out = vec![T::zero(); numel(to)];
    for_each_broadcast(to, from, |i, o| out[o] += x[i]);
    out
}

/// Whether `small` can be broadcast to `big` (same rank, each axis equal or 1).
pub fn broadcastable(small: &[usize], big: &[usize]) -> bool {
    small.len() == big.len() && small.iter().zip(big).all(|(&a, &b)| a == b || a == 1)
}

/// `op(A) * op(B)` for rank-2 operands; returns `(data, m, n)`.
pub fn matmul<T: Real>(
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    ta: bool,
    tb: bool,
) -> (Vec<T>, usize, usize) {
    let (ar, ac) = (a_shape[0], a_shape[1]);
    let (br, bc) = (b_shape[0], b_shape[1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let n = if tb { br } else { bc };
    let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
    let mut c = vec![T::zero(); m * n];
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: extents derived from the operand shapes; `c` is fresh.
        unsafe {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                T::zero(),
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    (c, m, n)
}

/// Geometry of a VALID (unpadded) strided 2-D convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize) -> Option<Self> {
        if x.len() != 4 || w.len() != 4 || stride == 0 || x[1] != w[1] {
            return None;
        }
        let (h, wd, kh, kw) = (x[2], x[3], w[2], w[3]);
        if kh > h || kw > wd || kh == 0 || kw == 0 {
            return None;
        }
        Some(ConvGeom {
            n: x[0],
            c: x[1],
            h,
            w: wd,
            o: w[0],
            kh,
            kw,
            stride,
            oh: (h - kh) / stride + 1,
            ow: (wd - kw) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.o, self.oh, self.ow]
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfolds image `img` (C x H x W) into a (C*kh*kw) x (oh*ow) matrix.
    fn im2col<T: Real>(&self, img: &[T], cols: &mut [T]) {
        let p = self.positions();
        for ch in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (ch * self.kh + i) * self.kw + j;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let src_row = &img[(ch * self.h + oy * self.stride + i) * self.w..];
                        for ox in 0..self.ow {
                            dst[oy * self.ow + ox] = src_row[ox * self.stride + j];
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of `im2col`: scatters-and-adds columns back into an image.
    fn col2im<T: Real>(&self, cols: &[T], img: &mut [T]) {
        let p = self.positions();
        for ch in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (ch * self.kh + i) * self.kw + j;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let base = (ch * self.h + oy * self.stride + i) * self.w;
                        for ox in 0..self.ow {
                            img[base + ox * self.stride + j] += src[oy * self.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d<T: Real>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let (kp, p) = (g.patch(), g.positions());
    let mut cols = vec![T::zero(); kp * p];
    let mut out = vec![T::zero(); g.n * g.o * p];
    let img_len = g.c * g.h * g.w;
    for b in 0..g.n {
        g.im2col(&x[b * img_len..(b + 1) * img_len], &mut cols);
        let dst = &mut out[b * g.o * p..(b + 1) * g.o * p];
        // SAFETY: w is o x kp, cols is kp x p, dst is o x p.
        unsafe {
            T::gemm(
                g.o,
                kp,
                p,
                T::one(),
                w.as_ptr(),
                kp as isize,
                1,
                cols.as_ptr(),
                p as isize,
                1,
                T::zero(),
                dst.as_mut_ptr(),
                p as isize,
                1,
            );
        }
    }
    out
}

/// Gradient of `<conv2d(x, w), gy>` with respect to `x`.
pub fn conv2d_input_grad<T: Real>(gy: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let (kp, p) = (g.patch(), g.positions());
    let mut cols = vec![T::zero(); kp * p];
    let img_len = g.c * g.h * g.w;
    let mut out = vec![T::zero(); g.n * img_len];
    for b in 0..g.n {
        let src = &gy[b * g.o * p..(b + 1) * g.o * p];
        // cols = w^T (kp x o) * src (o x p)
        unsafe {
            T::gemm(
                kp,
                g.o,
                p,
                T::one(),
                w.as_ptr(),
                1,
                kp as isize,
                src.as_ptr(),
                p as isize,
                1,
                T::zero(),
                cols.as_mut_ptr(),
                p as isize,
                1,
            );
        }
        g.col2im(&cols, &mut out[b * img_len..(b + 1) * img_len]);
    }
    out
}

/// Gradient of `<conv2d(x, w), gy>` with respect to `w`.
pub fn conv2d_weight_grad<T: Real>(x: &[T], gy: &[T], g: &ConvGeom) -> Vec<T> {
    let (kp, p) = (g.patch(), g.positions());
    let mut cols = vec![T::zero(); kp * p];
    let img_len = g.c * g.h * g.w;
    let mut out = vec![T::zero(); g.o * kp];
    for b in 0..g.n {
        g.im2col(&x[b * img_len..(b + 1) * img_len], &mut cols);
        let src = &gy[b * g.o * p..(b + 1) * g.o * p];
        // out += src (o x p) * cols^T (p x kp)
        unsafe {
            T::gemm(
                g.o,
                p,
                kp,
                T::one(),
                src.as_ptr(),
                p as isize,
                1,
                cols.as_ptr(),
                1,
                p as isize,
                T::one(),
                out.as_mut_ptr(),
                kp as isize,
                1,
            );
        }
    }
    out
}

/// Splits `shape` around `axis` into (outer, axis extent, inner).
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn concat<T: Real>(parts: &[(&[T], &[usize])], axis: usize, out_shape: &[usize]) -> Vec<T> {
    let (outer, total, inner) = axis_split(out_shape, axis);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (data, shape) in parts {
            let len = shape[axis] * inner;
            out.extend_from_slice(&data[o * len..(o + 1) * len]);
        }
    }
    out
}

pub fn slice<T: Real>(x: &[T], shape: &[usize], axis: usize, start: usize, len: usize) -> Vec<T> {
    let (outer, total, inner) = axis_split(shape, axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * total + start) * inner;
        out.extend_from_slice(&x[base..base + len * inner]);
    }
    out
}

/// Embeds `x` into zeros along `axis` at offset `before`, extent `total`.
pub fn pad<T: Real>(x: &[T], shape: &[usize], axis: usize, before: usize, total: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![T::zero(); outer * total * inner];
    for o in 0..outer {
        let dst = (o * total + before) * inner;
        out[dst..dst + len * inner].copy_from_slice(&x[o * len * inner..(o + 1) * len * inner]);
    }
    out
}

/// Normalizes each row of width `d` to zero mean and unit variance.
pub fn layer_norm<T: Real>(x: &[T], d: usize, eps: T) -> Vec<T> {
    let inv_d = T::one() / T::of(d as f64);
    let mut out = vec![T::zero(); x.len()];
    for (row, dst) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let r = T::one() / (var + eps).sqrt();
        for (o, &v) in dst.iter_mut().zip(row) {
            *o = (v - mean) * r;
        }
    }
    out
}

/// Vector-Jacobian product of `layer_norm` at `x` with upstream `gy`.
pub fn layer_norm_grad<T: Real>(x: &[T], gy: &[T], d: usize, eps: T) -> Vec<T> {
    let inv_d = T::one() / T::of(d as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); d];
    for ((row, g), dst) in x
        .chunks_exact(d)
        .zip(gy.chunks_exact(d))
        .zip(out.chunks_exact_mut(d))
    {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let r = T::one() / (var + eps).sqrt();
        for (yy, &v) in y.iter_mut().zip(row) {
            *yy = (v - mean) * r;
        }
        let g_mean = g.iter().copied().sum::<T>() * inv_d;
        let gy_mean = g.iter().zip(&y).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
        for i in 0..d {
            dst[i] = r * (g[i] - g_mean - y[i] * gy_mean);
        }
    }
    out
}
