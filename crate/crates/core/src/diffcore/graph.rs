//! Dynamic tape for reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is already a topological
//! order and backward is a single reverse sweep. A fresh graph is built for
//! every forward pass.

use crate::diffcore::array::{numel, Array};
use crate::diffcore::kernels::{self, Mat};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Square(Var),
    MatMul(Var, Var),
    Bmm {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Sum(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    BroadcastTo(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; exactly zero when `v` did not
    /// contribute to the loss.
    pub fn wrt(&self, v: Var) -> Array {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Array::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Array {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Array::zeros(&self.shapes[v.0]))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Differentiable leaf (a parameter or an input we want gradients for).
    pub fn leaf(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Constant, false)
    }

    // ---- elementwise, broadcasting ----

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Array> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            let data = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            return Array::new(va.shape(), data);
        }
        let out_shape = kernels::broadcast_shape(va.shape(), vb.shape())?;
        let sa = kernels::broadcast_strides(va.shape(), &out_shape);
        let sb = kernels::broadcast_strides(vb.shape(), &out_shape);
        let mut out = vec![0.0; numel(&out_shape)];
        let (da, db) = (va.data(), vb.data());
        kernels::for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| out[o] = f(da[i], db[j]));
        Array::new(&out_shape, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x / y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Div(a, b), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(v, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, kernels::gelu, Op::Gelu(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    // ---- linear algebra ----

    /// `a: [.., m, k] · w: [k, n] -> [.., m, n]`, leading axes flattened.
    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var> {
        let (va, vw) = (self.value(a), self.value(w));
        if vw.rank() != 2 || va.rank() == 0 || va.shape()[va.rank() - 1] != vw.dim(0) {
            return Err(Error::arg(format!(
                "matmul shapes {:?} x {:?}",
                va.shape(),
                vw.shape()
            )));
        }
        let (k, n) = (vw.dim(0), vw.dim(1));
        let rows = va.len() / k.max(1);
        let mut out = vec![0.0; rows * n];
        kernels::gemm(
            va.data(),
            Mat::dense(0, rows, k),
            vw.data(),
            Mat::dense(0, k, n),
            0.0,
            &mut out,
            Mat::dense(0, rows, n),
        );
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(w);
        Ok(self.push(Array::new(&shape, out)?, Op::MatMul(a, w), rg))
    }

    /// Batched product over 3-D operands; `ta`/`tb` transpose the last two axes.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 3 || vb.rank() != 3 || va.dim(0) != vb.dim(0) {
            return Err(Error::arg(format!(
                "bmm shapes {:?} x {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let (am, bm) = bmm_views(va.shape(), vb.shape(), ta, tb);
        if am.cols != bm.rows {
            return Err(Error::arg(format!(
                "bmm inner dims {:?} x {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let batch = va.dim(0);
        let (m, n) = (am.rows, bm.cols);
        let (sa, sb) = (va.len() / batch.max(1), vb.len() / batch.max(1));
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            kernels::gemm(
                va.data(),
                Mat {
                    offset: bi * sa,
                    ..am
                },
                vb.data(),
                Mat {
                    offset: bi * sb,
                    ..bm
                },
                0.0,
                &mut out,
                Mat::dense(bi * m * n, m, n),
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Array::new(&[batch, m, n], out)?,
            Op::Bmm { a, b, ta, tb },
            rg,
        ))
    }

    // ---- normalizations ----

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        kernels::check_axis(vx.shape(), axis)?;
        let out = kernels::softmax_forward(vx.data(), vx.shape(), axis);
        let v = Array::new(vx.shape(), out)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Softmax { x, axis }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        kernels::check_axis(vx.shape(), axis)?;
        let out = kernels::log_softmax_forward(vx.data(), vx.shape(), axis);
        let v = Array::new(vx.shape(), out)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::LogSoftmax { x, axis }, rg))
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta` (both `[width]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let width = *vx
            .shape()
            .last()
            .ok_or_else(|| Error::arg("layer_norm on a scalar"))?;
        if vg.len() != width || vb.len() != width {
            return Err(Error::arg(format!(
                "layer_norm gamma/beta length {}/{} vs width {}",
                vg.len(),
                vb.len(),
                width
            )));
        }
        if eps <= 0.0 {
            return Err(Error::arg("layer_norm eps must be positive"));
        }
        let (y, xhat, inv) =
            kernels::layer_norm_forward(vx.data(), width, vg.data(), vb.data(), eps);
        let v = Array::new(vx.shape(), y)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv,
            },
            rg,
        ))
    }

    /// Divides every last-axis vector by its Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let width = *vx
            .shape()
            .last()
            .ok_or_else(|| Error::arg("l2_normalize on a scalar"))?;
        let mut out = vx.data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / width.max(1));
        for (r, row) in out.chunks_mut(width).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(Error::numeric(format!(
                    "cannot unit-normalize row {r}: norm is {norm}"
                )));
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let v = Array::new(vx.shape(), out)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::L2Normalize { x, norms }, rg))
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Array::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        kernels::check_axis(vx.shape(), axis)?;
        let (outer, len, inner) = kernels::split_axis(vx.shape(), axis);
        let d = vx.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &d[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (acc, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += s;
                }
            }
        }
        let mut shape = vx.shape().to_vec();
        shape[axis] = 1;
        let rg = self.rg(x);
        Ok(self.push(Array::new(&shape, out)?, Op::SumAxis { x, axis }, rg))
    }

    // ---- shape manipulation ----

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        if sorted != (0..vx.rank()).collect::<Vec<_>>() {
            return Err(Error::arg(format!(
                "bad permutation {axes:?} for rank {}",
                vx.rank()
            )));
        }
        let (out, shape) = kernels::permute(vx.data(), vx.shape(), axes);
        let rg = self.rg(x);
        Ok(self.push(
            Array::new(&shape, out)?,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    /// Repeats size-1 axes of `x` to reach `shape` (same rank).
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let out_shape = kernels::broadcast_shape(vx.shape(), shape)?;
        if out_shape != shape {
            return Err(Error::arg(format!(
                "cannot broadcast {:?} to {:?}",
                vx.shape(),
                shape
            )));
        }
        let sa = kernels::broadcast_strides(vx.shape(), shape);
        let d = vx.data();
        let mut out = vec![0.0; numel(shape)];
        kernels::for_each_broadcast(shape, &sa, &sa, |o, i, _| out[o] = d[i]);
        let rg = self.rg(x);
        Ok(self.push(Array::new(shape, out)?, Op::BroadcastTo(x), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::arg("concat of nothing"))?;
        let base = self.shape(*first).to_vec();
        kernels::check_axis(&base, axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let same_rest = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !same_rest {
                return Err(Error::arg(format!("concat shapes {:?} vs {:?}", s, base)));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = kernels::split_axis(&shape, axis);
        let mut out = vec![0.0; numel(&shape)];
        let mut at = 0;
        for &p in parts {
            let len = self.shape(p)[axis];
            let src = self.value(p).data();
            for o in 0..outer {
                let dst = (o * total + at) * inner;
                out[dst..dst + len * inner]
                    .copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
            at += len;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Array::new(&shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        kernels::check_axis(vx.shape(), axis)?;
        if start + len > vx.dim(axis) {
            return Err(Error::arg(format!(
                "narrow [{start}, {}) out of range for axis {axis} of {:?}",
                start + len,
                vx.shape()
            )));
        }
        let (outer, full, inner) = kernels::split_axis(vx.shape(), axis);
        let d = vx.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            out.extend_from_slice(&d[s..s + len * inner]);
        }
        let mut shape = vx.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Array::new(&shape, out)?, Op::Narrow { x, axis, start }, rg))
    }

    /// Selects rows (axis 0) by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() == 0 {
            return Err(Error::arg("gather_rows on a scalar"));
        }
        let rows = vx.dim(0);
        let width = vx.len() / rows.max(1);
        let mut out = Vec::with_capacity(index.len() * width);
        for &i in index {
            if i >= rows {
                return Err(Error::arg(format!(
                    "row index {i} out of range ({rows} rows)"
                )));
            }
            out.extend_from_slice(&vx.data()[i * width..(i + 1) * width]);
        }
        let mut shape = vx.shape().to_vec();
        shape[0] = index.len();
        let rg = self.rg(x);
        Ok(self.push(
            Array::new(&shape, out)?,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    // ---- reverse sweep ----

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array::full(lv.shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &Array, grads: &mut [Option<Array>]) -> Result<()> {
        let mut acc = |v: Var, data: Vec<f64>| -> Result<()> {
            if !self.rg(v) {
                return Ok(());
            }
            let arr = Array::new(self.shape(v), data)?;
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&arr),
                slot @ None => *slot = Some(arr),
            }
            Ok(())
        };
        let gd = g.data();
        let out_shape = node.value.shape();
        let y = node.value.data();

        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if self.rg(*a) {
                    acc(*a, kernels::reduce_to(gd, out_shape, self.shape(*a)))?;
                }
                if self.rg(*b) {
                    let mut r = kernels::reduce_to(gd, out_shape, self.shape(*b));
                    if sign < 0.0 {
                        r.iter_mut().for_each(|v| *v = -*v);
                    }
                    acc(*b, r)?;
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let (va, vb) = (self.value(*a), self.value(*b));
                let sa = kernels::broadcast_strides(va.shape(), out_shape);
                let sb = kernels::broadcast_strides(vb.shape(), out_shape);
                let (da, db) = (va.data(), vb.data());
                if self.rg(*a) {
                    let mut ga = vec![0.0; va.len()];
                    kernels::for_each_broadcast(out_shape, &sa, &sb, |o, i, j| {
                        ga[i] += if is_div { gd[o] / db[j] } else { gd[o] * db[j] };
                    });
                    acc(*a, ga)?;
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; vb.len()];
                    kernels::for_each_broadcast(out_shape, &sa, &sb, |o, i, j| {
                        gb[j] += if is_div {
                            -gd[o] * da[i] / (db[j] * db[j])
                        } else {
                            gd[o] * da[i]
                        };
                    });
                    acc(*b, gb)?;
                }
            }
            Op::Scale(x, c) => acc(*x, gd.iter().map(|v| v * c).collect())?,
            Op::AddScalar(x) => acc(*x, gd.to_vec())?,
            Op::Exp(x) => acc(*x, gd.iter().zip(y).map(|(g, y)| g * y).collect())?,
            Op::Log(x) => {
                let xd = self.value(*x).data();
                acc(*x, gd.iter().zip(xd).map(|(g, x)| g / x).collect())?
            }
            Op::Tanh(x) => acc(
                *x,
                gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
            )?,
            Op::Sigmoid(x) => acc(
                *x,
                gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
            )?,
            Op::Gelu(x) => {
                let xd = self.value(*x).data();
                acc(
                    *x,
                    gd.iter()
                        .zip(xd)
                        .map(|(g, &x)| g * kernels::gelu_grad(x))
                        .collect(),
                )?
            }
            Op::Square(x) => {
                let xd = self.value(*x).data();
                acc(*x, gd.iter().zip(xd).map(|(g, x)| 2.0 * g * x).collect())?
            }
            Op::MatMul(a, w) => {
                let (va, vw) = (self.value(*a), self.value(*w));
                let (k, n) = (vw.dim(0), vw.dim(1));
                let rows = va.len() / k.max(1);
                if self.rg(*a) {
                    let mut ga = vec![0.0; rows * k];
                    kernels::gemm(
                        gd,
                        Mat::dense(0, rows, n),
                        vw.data(),
                        Mat::dense(0, k, n).t(),
                        0.0,
                        &mut ga,
                        Mat::dense(0, rows, k),
                    );
                    acc(*a, ga)?;
                }
                if self.rg(*w) {
                    let mut gw = vec![0.0; k * n];
                    kernels::gemm(
                        va.data(),
                        Mat::dense(0, rows, k).t(),
                        gd,
                        Mat::dense(0, rows, n),
                        0.0,
                        &mut gw,
                        Mat::dense(0, k, n),
                    );
                    acc(*w, gw)?;
                }
            }
            Op::Bmm { a, b, ta, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (am, bm) = bmm_views(va.shape(), vb.shape(), *ta, *tb);
                let batch = va.dim(0);
                let (m, n) = (am.rows, bm.cols);
                let (sa, sb) = (va.len() / batch.max(1), vb.len() / batch.max(1));
                if self.rg(*a) {
                    // d(op(A)) = G · op(B)ᵀ, written back through op's strides
                    let mut ga = vec![0.0; va.len()];
                    for bi in 0..batch {
                        let gview = Mat::dense(bi * m * n, m, n);
                        let dst = Mat {
                            offset: bi * sa,
                            ..am
                        };
                        kernels::gemm(
                            gd,
                            gview,
                            vb.data(),
                            Mat {
                                offset: bi * sb,
                                ..bm
                            }
                            .t(),
                            0.0,
                            &mut ga,
                            dst,
                        );
                    }
                    acc(*a, ga)?;
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; vb.len()];
                    for bi in 0..batch {
                        let gview = Mat::dense(bi * m * n, m, n);
                        let dst = Mat {
                            offset: bi * sb,
                            ..bm
                        };
                        kernels::gemm(
                            va.data(),
                            Mat {
                                offset: bi * sa,
                                ..am
                            }
                            .t(),
                            gd,
                            gview,
                            0.0,
                            &mut gb,
                            dst,
                        );
                    }
                    acc(*b, gb)?;
                }
            }
            Op::Softmax { x, axis } => acc(*x, kernels::softmax_backward(y, gd, out_shape, *axis))?,
            Op::LogSoftmax { x, axis } => {
                acc(*x, kernels::log_softmax_backward(y, gd, out_shape, *axis))?
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv,
            } => {
                let width = *out_shape.last().unwrap();
                let vg = self.value(*gamma).data();
                let (dx, dgamma, dbeta) = kernels::layer_norm_backward(gd, xhat, inv, vg, width);
                acc(*x, dx)?;
                acc(*gamma, dgamma)?;
                acc(*beta, dbeta)?;
            }
            Op::L2Normalize { x, norms } => {
                let width = *out_shape.last().unwrap();
                let mut dx = vec![0.0; gd.len()];
                for (r, norm) in norms.iter().enumerate() {
                    let s = r * width..(r + 1) * width;
                    let (yr, gr) = (&y[s.clone()], &gd[s.clone()]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (d, (yv, gv)) in dx[s].iter_mut().zip(yr.iter().zip(gr)) {
                        *d = (gv - yv * dot) / norm;
                    }
                }
                acc(*x, dx)?;
            }
            Op::Sum(x) => acc(*x, vec![gd[0]; self.value(*x).len()])?,
            Op::SumAxis { x, axis } => {
                let xs = self.shape(*x);
                let (outer, len, inner) = kernels::split_axis(xs, *axis);
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        let dst = (o * len + j) * inner;
                        dx[dst..dst + inner].copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                acc(*x, dx)?;
            }
            Op::Reshape(x) => acc(*x, gd.to_vec())?,
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (dx, _) = kernels::permute(gd, out_shape, &inverse);
                acc(*x, dx)?;
            }
            Op::BroadcastTo(x) => acc(*x, kernels::reduce_to(gd, out_shape, self.shape(*x)))?,
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = kernels::split_axis(out_shape, *axis);
                let mut at = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let s = (o * total + at) * inner;
                            dp.extend_from_slice(&gd[s..s + len * inner]);
                        }
                        acc(p, dp)?;
                    }
                    at += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, full, inner) = kernels::split_axis(xs, *axis);
                let len = out_shape[*axis];
                let mut dx = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let d = (o * full + start) * inner;
                    dx[d..d + len * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, dx)?;
            }
            Op::GatherRows { x, index } => {
                let vx = self.value(*x);
                let width = vx.len() / vx.dim(0).max(1);
                let mut dx = vec![0.0; vx.len()];
                for (r, &i) in index.iter().enumerate() {
                    for (d, s) in dx[i * width..(i + 1) * width]
                        .iter_mut()
                        .zip(&gd[r * width..(r + 1) * width])
                    {
                        *d += s;
                    }
                }
                acc(*x, dx)?;
            }
        }
        Ok(())
    }
}

fn bmm_views(sa: &[usize], sb: &[usize], ta: bool, tb: bool) -> (Mat, Mat) {
    let a = Mat::dense(0, sa[1], sa[2]);
    let b = Mat::dense(0, sb[1], sb[2]);
    (if ta { a.t() } else { a }, if tb { b.t() } else { b })
}
