//! Define-by-run reverse-mode differentiation.
//!
//! Every op evaluates eagerly and appends a node; node order is execution order,
//! so a reverse sweep over the node list is a valid topological traversal.

use super::conv::{col2im, im2col, ConvGeom};
use super::{ParamId, ParamStore, Real};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiffAxis {
    /// Along the last (width) axis.
    X,
    /// Along the second-to-last (height) axis.
    Y,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf(Option<ParamId>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Square(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    Upsample2x(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    StopGradient,
    Inverse(Var),
    SpatialDiff(Var, DiffAxis),
}

#[derive(Clone, Debug)]
struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. Rebuilt for every training step.
#[derive(Debug)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits `shape` around `axis` into `(outer, axis_len, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph in which parameters enter as constants; nothing is differentiable.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].data[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        if numel(shape) != data.len() || shape.is_empty() && data.len() != 1 {
            return Err(Error::shape("constant", shape, &[data.len()]));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf(None), false))
    }

    pub fn scalar_constant(&mut self, x: T) -> Var {
        self.push(vec![1], vec![x], Op::Leaf(None), false)
    }

    /// Copies the current value of a parameter into the graph as a trainable leaf.
    pub fn param(&mut self, params: &ParamStore<T>, id: ParamId) -> Var {
        let t = params.get(id);
        let tracked = self.grad_enabled;
        let op = Op::Leaf(tracked.then_some(id));
        self.push(t.shape().to_vec(), t.data().to_vec(), op, tracked)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, node: Op<T>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), data, node, rg))
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T, node: Op<T>) -> Var {
        let data = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), data, node, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("maximum", a, b, |x, y| if x >= y { x } else { y }, Op::Maximum(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("minimum", a, b, |x, y| if x <= y { x } else { y }, Op::Minimum(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.map(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: T) -> Var {
        self.map(a, |x| x * c, Op::MulScalar(a, c))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, |x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid(a))
    }

    /// Marks `a` as constant for differentiation; the forward value is unchanged.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let data = self.value(a).to_vec();
        self.push(self.shape(a).to_vec(), data, Op::StopGradient, false)
    }

    fn last_axis(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        let shape = self.shape(a);
        match shape.last() {
            Some(&n) if n > 0 => Ok((numel(shape) / n, n)),
            _ => Err(Error::shape(op, shape, &[])),
        }
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, n) = self.last_axis("softmax", a)?;
        let x = self.value(a);
        let mut out = vec![T::zero(); rows * n];
        for r in 0..rows {
            let row = &x[r * n..(r + 1) * n];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let dst = &mut out[r * n..(r + 1) * n];
            let mut total = T::zero();
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - max).exp();
                total += *d;
            }
            dst.iter_mut().for_each(|d| *d = *d / total);
        }
        let rg = self.rg(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Softmax(a), rg))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, n) = self.last_axis("log_softmax", a)?;
        let x = self.value(a);
        let mut out = vec![T::zero(); rows * n];
        for r in 0..rows {
            let row = &x[r * n..(r + 1) * n];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).fold(T::zero(), |s, e| s + e).ln();
            for (d, &v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *d = v - lse;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::LogSoftmax(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().fold(T::zero(), |s, &x| s + x);
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::of(self.value(a).len() as f64);
        let s = self.value(a).iter().fold(T::zero(), |s, &x| s + x);
        let rg = self.rg(a);
        self.push(vec![1], vec![s / n], Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let data = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), data, Op::Reshape(a), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        let out = transpose(self.value(a), r, c);
        let rg = self.rg(a);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), rg))
    }

    /// Fully-connected layer `x·wᵀ + b` with `x: B×in`, `w: out×in`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::shape("linear", sx, sw));
        }
        if sb != [sw[0]] {
            return Err(Error::shape("linear bias", sw, sb));
        }
        let (rows, fan_in, fan_out) = (sx[0], sx[1], sw[0]);
        let mut out = vec![T::zero(); rows * fan_out];
        for r in 0..rows {
            out[r * fan_out..(r + 1) * fan_out].copy_from_slice(self.value(b));
        }
        T::gemm(rows, fan_in, fan_out, self.value(x), false, self.value(w), true, &mut out, true);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(vec![rows, fan_out], out, Op::Linear { x, w, b }, rg))
    }

    /// 2-D convolution of `x: N×C_in×H×W` with `w: C_out×C_in×k×k` plus bias `b: C_out`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] {
            return Err(Error::shape("conv2d", sx, sw));
        }
        if sb != [sw[0]] {
            return Err(Error::shape("conv2d bias", sw, sb));
        }
        let (n, c_out) = (sx[0], sw[0]);
        let geom = ConvGeom::new(sx[1], sx[2], sx[3], sw[2], stride, pad)
            .ok_or_else(|| Error::shape("conv2d geometry", sx, sw))?;
        let (kk, hw) = (geom.col_rows(), geom.col_cols());
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let mut out = vec![T::zero(); n * c_out * hw];
        let cs = chunk_len(&geom, n);
        let mut cols = vec![T::zero(); kk * cs * hw];
        let mut wide = vec![T::zero(); c_out * cs * hw];
        for i0 in (0..n).step_by(cs) {
            let cn = cs.min(n - i0);
            chunk_im2col(&geom, xv, i0, cn, &mut cols);
            T::gemm(c_out, kk, cn * hw, wv, false, &cols, false, &mut wide, false);
            for c in 0..c_out {
                for j in 0..cn {
                    let src = &wide[(c * cn + j) * hw..(c * cn + j + 1) * hw];
                    let o = ((i0 + j) * c_out + c) * hw;
                    for (d, &v) in out[o..o + hw].iter_mut().zip(src) {
                        *d = v + bv[c];
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let shape = vec![n, c_out, geom.h_out, geom.w_out];
        Ok(self.push(shape, out, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Nearest-neighbour 2× upsampling of the two trailing axes.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("upsample2x", &s, &[]));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = numel(&s[..s.len() - 2]);
        let x = self.value(a);
        let mut out = vec![T::zero(); planes * 4 * h * w];
        for p in 0..planes {
            let src = &x[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xo in 0..2 * w {
                    dst[y * 2 * w + xo] = src[(y / 2) * w + xo / 2];
                }
            }
        }
        let mut shape = s.clone();
        let nd = shape.len();
        shape[nd - 2] *= 2;
        shape[nd - 1] *= 2;
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::Upsample2x(a), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Config("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat axis", &base, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(shape, out, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape("narrow", &s, &[axis, start, len]));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let src = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Narrow { x, axis, start }, rg))
    }

    /// Matrix inverse of square `a`, with the forward value supplied by the caller
    /// (a cached factorization). The backward pass uses `d(A⁻¹) = −A⁻¹·dA·A⁻¹`.
    pub fn inverse_with(&mut self, a: Var, inverse: Vec<T>) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[0] != s[1] || inverse.len() != s[0] * s[1] {
            return Err(Error::shape("inverse", &s, &[inverse.len()]));
        }
        let rg = self.rg(a);
        Ok(self.push(s, inverse, Op::Inverse(a), rg))
    }

    /// Forward difference along one trailing spatial axis; the last entry is 0.
    pub fn spatial_diff(&mut self, a: Var, axis: DiffAxis) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("spatial_diff", &s, &[]));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = numel(&s[..s.len() - 2]);
        let x = self.value(a);
        let mut out = vec![T::zero(); x.len()];
        for p in 0..planes {
            let off = p * h * w;
            for y in 0..h {
                for xx in 0..w {
                    let i = off + y * w + xx;
                    out[i] = match axis {
                        DiffAxis::X if xx + 1 < w => x[i + 1] - x[i],
                        DiffAxis::Y if y + 1 < h => x[i + w] - x[i],
                        _ => T::zero(),
                    };
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(s, out, Op::SpatialDiff(a, axis), rg))
    }

    /// Back-propagates from scalar `loss`, adding `∂loss/∂param` into the gradient
    /// buffer of every parameter that reached it. Repeated calls accumulate.
    pub fn backward(&self, loss: Var, params: &mut ParamStore<T>) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Config("backward on an empty graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward (loss must be scalar)", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads, params);
        }
        Ok(())
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].data.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn acc_with(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl Fn(usize) -> T) {
        if let Some(buf) = self.acc(grads, v) {
            buf.iter_mut().enumerate().for_each(|(j, d)| *d += f(j));
        }
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        params: &mut ParamStore<T>,
    ) {
        let val = |v: Var| -> &[T] { &self.nodes[v.0].data };
        let out = &node.data;
        match &node.op {
            Op::Leaf(Some(pid)) => params.accumulate_grad(*pid, g),
            Op::Leaf(None) | Op::StopGradient => {}
            Op::Add(a, b) => {
                self.acc_with(grads, *a, |j| g[j]);
                self.acc_with(grads, *b, |j| g[j]);
            }
            Op::Sub(a, b) => {
                self.acc_with(grads, *a, |j| g[j]);
                self.acc_with(grads, *b, |j| -g[j]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                self.acc_with(grads, *a, |j| g[j] * bv[j]);
                self.acc_with(grads, *b, |j| g[j] * av[j]);
            }
            Op::AddScalar(a) | Op::Reshape(a) => self.acc_with(grads, *a, |j| g[j]),
            Op::MulScalar(a, c) => self.acc_with(grads, *a, |j| g[j] * *c),
            Op::Square(a) => {
                let av = val(*a);
                let two = T::of(2.0);
                self.acc_with(grads, *a, |j| two * av[j] * g[j]);
            }
            Op::Relu(a) => self.acc_with(grads, *a, |j| {
                if out[j] > T::zero() {
                    g[j]
                } else {
                    T::zero()
                }
            }),
            Op::Sigmoid(a) => self.acc_with(grads, *a, |j| g[j] * out[j] * (T::one() - out[j])),
            Op::Softmax(a) => {
                let n = *node.shape.last().unwrap();
                if let Some(buf) = self.acc(grads, *a) {
                    for r in 0..out.len() / n {
                        let (y, gr) = (&out[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        let dot = y.iter().zip(gr).fold(T::zero(), |s, (&p, &q)| s + p * q);
                        for j in 0..n {
                            buf[r * n + j] += y[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let n = *node.shape.last().unwrap();
                if let Some(buf) = self.acc(grads, *a) {
                    for r in 0..out.len() / n {
                        let (y, gr) = (&out[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        let total = gr.iter().fold(T::zero(), |s, &q| s + q);
                        for j in 0..n {
                            buf[r * n + j] += gr[j] - y[j].exp() * total;
                        }
                    }
                }
            }
            Op::Sum(a) => self.acc_with(grads, *a, |_| g[0]),
            Op::Mean(a) => {
                let scale = g[0] / T::of(val(*a).len() as f64);
                self.acc_with(grads, *a, |_| scale);
            }
            Op::Maximum(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                self.acc_with(grads, *a, |j| if av[j] >= bv[j] { g[j] } else { T::zero() });
                self.acc_with(grads, *b, |j| if av[j] >= bv[j] { T::zero() } else { g[j] });
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                self.acc_with(grads, *a, |j| if av[j] <= bv[j] { g[j] } else { T::zero() });
                self.acc_with(grads, *b, |j| if av[j] <= bv[j] { T::zero() } else { g[j] });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if let Some(buf) = self.acc(grads, *a) {
                    T::gemm(m, n, k, g, false, val(*b), true, buf, true);
                }
                if let Some(buf) = self.acc(grads, *b) {
                    T::gemm(k, m, n, val(*a), true, g, false, buf, true);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (node.shape[0], node.shape[1]);
                let gt = transpose(g, r, c);
                self.acc_with(grads, *a, |j| gt[j]);
            }
            Op::Linear { x, w, b } => {
                let (rows, fan_in) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let fan_out = node.shape[1];
                if let Some(buf) = self.acc(grads, *x) {
                    T::gemm(rows, fan_out, fan_in, g, false, val(*w), false, buf, true);
                }
                if let Some(buf) = self.acc(grads, *w) {
                    T::gemm(fan_out, rows, fan_in, g, true, val(*x), false, buf, true);
                }
                if let Some(buf) = self.acc(grads, *b) {
                    for r in 0..rows {
                        for (d, &q) in buf.iter_mut().zip(&g[r * fan_out..(r + 1) * fan_out]) {
                            *d += q;
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => self.conv_backward(node, g, grads, *x, *w, *b, geom),
            Op::Upsample2x(a) => {
                let s = &self.nodes[a.0].shape;
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                if let Some(buf) = self.acc(grads, *a) {
                    for p in 0..buf.len() / (h * w) {
                        let src = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                        let dst = &mut buf[p * h * w..(p + 1) * h * w];
                        for y in 0..2 * h {
                            for xo in 0..2 * w {
                                dst[(y / 2) * w + xo / 2] += src[y * 2 * w + xo];
                            }
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.nodes[v.0].shape[*axis];
                    if let Some(buf) = self.acc(grads, v) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut buf[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(d, &q)| *d += q);
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, n, inner) = split_axis(&self.nodes[x.0].shape, *axis);
                let len = node.shape[*axis];
                if let Some(buf) = self.acc(grads, *x) {
                    for o in 0..outer {
                        let dst = &mut buf[(o * n + start) * inner..(o * n + start + len) * inner];
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(d, &q)| *d += q);
                    }
                }
            }
            Op::Inverse(a) => {
                let d = node.shape[0];
                if let Some(buf) = self.acc(grads, *a) {
                    // dA = −Xᵀ·G·Xᵀ with X = A⁻¹.
                    let mut tmp = vec![T::zero(); d * d];
                    T::gemm(d, d, d, out, true, g, false, &mut tmp, false);
                    let mut da = vec![T::zero(); d * d];
                    T::gemm(d, d, d, &tmp, false, out, true, &mut da, false);
                    buf.iter_mut().zip(&da).for_each(|(b, &q)| *b -= q);
                }
            }
            Op::SpatialDiff(a, axis) => {
                let s = &node.shape;
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                if let Some(buf) = self.acc(grads, *a) {
                    for p in 0..buf.len() / (h * w) {
                        let off = p * h * w;
                        for y in 0..h {
                            for xx in 0..w {
                                let i = off + y * w + xx;
                                let next = match axis {
                                    DiffAxis::X if xx + 1 < w => i + 1,
                                    DiffAxis::Y if y + 1 < h => i + w,
                                    _ => continue,
                                };
                                buf[next] += g[i];
                                buf[i] -= g[i];
                            }
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        node: &Node<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        x: Var,
        w: Var,
        b: Var,
        geom: &ConvGeom,
    ) {
        let n = node.shape[0];
        let c_out = node.shape[1];
        let (kk, hw) = (geom.col_rows(), geom.col_cols());
        let in_len = geom.c_in * geom.h * geom.w;
        let need_w = self.rg(w);
        let need_x = self.rg(x);
        if let Some(buf) = self.acc(grads, b) {
            for (k, chunk) in g.chunks(hw).enumerate() {
                buf[k % c_out] += chunk.iter().fold(T::zero(), |s, &q| s + q);
            }
        }
        if !need_w && !need_x {
            return;
        }
        let xv = &self.nodes[x.0].data;
        let wv = &self.nodes[w.0].data;
        let cs = chunk_len(geom, n);
        let mut cols = vec![T::zero(); kk * cs * hw];
        let mut wide = vec![T::zero(); c_out * cs * hw];
        let mut dw = need_w.then(|| vec![T::zero(); wv.len()]);
        let mut dx = need_x.then(|| vec![T::zero(); xv.len()]);
        for i0 in (0..n).step_by(cs) {
            let cn = cs.min(n - i0);
            // Output gradient of the chunk as C_out × (cn·HW), matching the column layout.
            for j in 0..cn {
                for c in 0..c_out {
                    let src = ((i0 + j) * c_out + c) * hw;
                    wide[(c * cn + j) * hw..(c * cn + j + 1) * hw].copy_from_slice(&g[src..src + hw]);
                }
            }
            if let Some(dw) = dw.as_mut() {
                chunk_im2col(geom, xv, i0, cn, &mut cols);
                T::gemm(c_out, cn * hw, kk, &wide, false, &cols, true, dw, true);
            }
            if let Some(dx) = dx.as_mut() {
                T::gemm(kk, c_out, cn * hw, wv, true, &wide, false, &mut cols, false);
                for j in 0..cn {
                    let i = i0 + j;
                    col2im(geom, &mut cols[j * hw..], cn * hw, &mut dx[i * in_len..(i + 1) * in_len]);
                }
            }
        }
        if let (Some(dw), Some(buf)) = (dw, self.acc(grads, w)) {
            buf.iter_mut().zip(&dw).for_each(|(d, &q)| *d += q);
        }
        if let (Some(dx), Some(buf)) = (dx, self.acc(grads, x)) {
            buf.iter_mut().zip(&dx).for_each(|(d, &q)| *d += q);
        }
    }
}

/// Column-matrix budget per chunk, in elements; small enough to stay in cache.
const COLS_BUDGET: usize = 1 << 14;

/// Samples per im2col chunk.
fn chunk_len(geom: &ConvGeom, n: usize) -> usize {
    (COLS_BUDGET / (geom.col_rows() * geom.col_cols())).clamp(1, n.max(1))
}

/// Columns of samples `i0..i0 + cn` side by side: `K × (cn·HW)`.
fn chunk_im2col<T: Real>(geom: &ConvGeom, x: &[T], i0: usize, cn: usize, cols: &mut [T]) {
    let hw = geom.col_cols();
    let in_len = geom.c_in * geom.h * geom.w;
    for j in 0..cn {
        let i = i0 + j;
        im2col(geom, &x[i * in_len..(i + 1) * in_len], &mut cols[j * hw..], cn * hw);
    }
}

fn transpose<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}
