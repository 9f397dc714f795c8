//! Eager reverse-mode differentiation.
//!
//! Every op evaluates immediately and appends a node to the tape; node inputs
//! always have smaller indices, so a single reverse sweep visits nodes in a
//! valid order.

use std::cell::{Ref, RefCell};

use super::ops::{gelu_grad, gelu_scalar, layer_norm_slice, log_sum_exp, matmul_nt_into, matmul_tn_into};
use super::{lit, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddColBias {
        x: usize,
        bias: usize,
    },
    Scale(usize, T),
    Sum(usize),
    Gelu(usize),
    LayerNormCols {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    EmbedCols {
        table: usize,
        tokens: Vec<usize>,
    },
    RotatePairs {
        x: usize,
        cos: Vec<T>,
        sin: Vec<T>,
    },
    SliceRows {
        x: usize,
        start: usize,
    },
    ConcatRows(Vec<usize>),
    CausalMask {
        x: usize,
        window: usize,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    LogSoftmaxGather {
        logits: usize,
        cols: Vec<usize>,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    DotConst {
        x: usize,
        coeffs: Vec<T>,
    },
    LogSigmoid(usize),
    Column {
        x: usize,
        j: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Append-only record of the forward computation.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record an input. Parameters and constants are both leaves; only the
    /// caller decides which gradients to read.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.shape(), T::one()));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: usize, shape: &[usize], f: impl FnOnce(&mut [T])) {
    let slot = grads[id].get_or_insert_with(|| Tensor::zeros(shape));
    f(slot.data_mut());
}

fn backprop<T: Scalar>(nodes: &[Node<T>], id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    let out = &nodes[id].value;
    let gd = g.data();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            accumulate(grads, *a, av.shape(), |da| matmul_nt_into(gd, bv.data(), da, m, n, k));
            accumulate(grads, *b, bv.shape(), |db| matmul_tn_into(av.data(), gd, db, m, k, n));
        }
        Op::Transpose(a) => {
            let gt = super::ops::transpose(g);
            accumulate(grads, *a, nodes[*a].value.shape(), |da| add_into(da, gt.data()));
        }
        Op::Add(a, b) => {
            accumulate(grads, *a, out.shape(), |da| add_into(da, gd));
            accumulate(grads, *b, out.shape(), |db| add_into(db, gd));
        }
        Op::Sub(a, b) => {
            accumulate(grads, *a, out.shape(), |da| add_into(da, gd));
            accumulate(grads, *b, out.shape(), |db| {
                for (d, &x) in db.iter_mut().zip(gd) {
                    *d -= x;
                }
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            accumulate(grads, *a, out.shape(), |da| {
                for ((d, &x), &y) in da.iter_mut().zip(gd).zip(bv) {
                    *d += x * y;
                }
            });
            accumulate(grads, *b, out.shape(), |db| {
                for ((d, &x), &y) in db.iter_mut().zip(gd).zip(av) {
                    *d += x * y;
                }
            });
        }
        Op::AddColBias { x, bias } => {
            accumulate(grads, *x, out.shape(), |dx| add_into(dx, gd));
            let (m, n) = (out.rows(), out.cols());
            accumulate(grads, *bias, nodes[*bias].value.shape(), |db| {
                for i in 0..m {
                    db[i] += gd[i * n..(i + 1) * n].iter().copied().sum::<T>();
                }
            });
        }
        Op::Scale(x, c) => {
            accumulate(grads, *x, out.shape(), |dx| {
                for (d, &v) in dx.iter_mut().zip(gd) {
                    *d += v * *c;
                }
            });
        }
        Op::Sum(x) => {
            let s = gd[0];
            accumulate(grads, *x, nodes[*x].value.shape(), |dx| {
                for d in dx.iter_mut() {
                    *d += s;
                }
            });
        }
        Op::Gelu(x) => {
            let xv = nodes[*x].value.data();
            accumulate(grads, *x, out.shape(), |dx| {
                for ((d, &v), &xi) in dx.iter_mut().zip(gd).zip(xv) {
                    *d += v * gelu_grad(xi);
                }
            });
        }
        Op::LayerNormCols {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let (d, t) = (out.rows(), out.cols());
            let gam = nodes[*gamma].value.data();
            let mut dgamma = vec![T::zero(); d];
            let mut dbeta = vec![T::zero(); d];
            let mut dx = vec![T::zero(); d * t];
            let dn = lit::<T>(d as f64);
            for j in 0..t {
                let mut sum_dxhat = T::zero();
                let mut sum_dxhat_xhat = T::zero();
                for i in 0..d {
                    let gij = gd[i * t + j];
                    let xh = xhat[i * t + j];
                    dgamma[i] += gij * xh;
                    dbeta[i] += gij;
                    let dxh = gij * gam[i];
                    sum_dxhat += dxh;
                    sum_dxhat_xhat += dxh * xh;
                }
                for i in 0..d {
                    let dxh = gd[i * t + j] * gam[i];
                    let xh = xhat[i * t + j];
                    dx[i * t + j] = rstd[j] / dn * (dn * dxh - sum_dxhat - xh * sum_dxhat_xhat);
                }
            }
            accumulate(grads, *x, out.shape(), |g| add_into(g, &dx));
            accumulate(grads, *gamma, &[d], |g| add_into(g, &dgamma));
            accumulate(grads, *beta, &[d], |g| add_into(g, &dbeta));
        }
        Op::EmbedCols { table, tokens } => {
            let tshape = nodes[*table].value.shape();
            let v = tshape[1];
            let (d, t) = (out.rows(), out.cols());
            accumulate(grads, *table, tshape, |dt| {
                for (j, &tok) in tokens.iter().enumerate() {
                    for i in 0..d {
                        dt[i * v + tok] += gd[i * t + j];
                    }
                }
            });
        }
        Op::RotatePairs { x, cos, sin } => {
            let (rows, t) = (out.rows(), out.cols());
            accumulate(grads, *x, out.shape(), |dx| {
                for p in 0..rows / 2 {
                    for j in 0..t {
                        let (c, s) = (cos[p * t + j], sin[p * t + j]);
                        let g0 = gd[2 * p * t + j];
                        let g1 = gd[(2 * p + 1) * t + j];
                        dx[2 * p * t + j] += g0 * c + g1 * s;
                        dx[(2 * p + 1) * t + j] += -g0 * s + g1 * c;
                    }
                }
            });
        }
        Op::SliceRows { x, start } => {
            let n = out.cols();
            let off = start * n;
            accumulate(grads, *x, nodes[*x].value.shape(), |dx| {
                add_into(&mut dx[off..off + gd.len()], gd);
            });
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let shape = nodes[p].value.shape();
                let len = nodes[p].value.len();
                accumulate(grads, p, shape, |dp| add_into(dp, &gd[off..off + len]));
                off += len;
            }
        }
        Op::CausalMask { x, window } => {
            let t = out.cols();
            accumulate(grads, *x, out.shape(), |dx| {
                for s in 0..out.rows() {
                    for c in 0..t {
                        if visible(s, c, *window) {
                            dx[s * t + c] += gd[s * t + c];
                        }
                    }
                }
            });
        }
        Op::Softmax { x, axis } => {
            let y = out.data();
            let mut dx = vec![T::zero(); y.len()];
            for_each_slice(out.shape(), *axis, |idx| {
                let dot: T = idx.iter().map(|&k| y[k] * gd[k]).sum();
                for &k in idx {
                    dx[k] = y[k] * (gd[k] - dot);
                }
            });
            accumulate(grads, *x, out.shape(), |g| add_into(g, &dx));
        }
        Op::LogSoftmaxGather {
            logits,
            cols,
            targets,
            probs,
        } => {
            let lv = &nodes[*logits].value;
            let (v, t) = (lv.rows(), lv.cols());
            accumulate(grads, *logits, lv.shape(), |dl| {
                for (n, (&c, &tgt)) in cols.iter().zip(targets).enumerate() {
                    let gn = gd[n];
                    for i in 0..v {
                        dl[i * t + c] -= gn * probs[n * v + i];
                    }
                    dl[tgt * t + c] += gn;
                }
            });
        }
        Op::DotConst { x, coeffs } => {
            let s = gd[0];
            accumulate(grads, *x, nodes[*x].value.shape(), |dx| {
                for (d, &c) in dx.iter_mut().zip(coeffs) {
                    *d += s * c;
                }
            });
        }
        Op::LogSigmoid(x) => {
            let xv = nodes[*x].value.data();
            accumulate(grads, *x, out.shape(), |dx| {
                for ((d, &v), &xi) in dx.iter_mut().zip(gd).zip(xv) {
                    *d += v * sigmoid(-xi);
                }
            });
        }
        Op::Column { x, j } => {
            let xv = &nodes[*x].value;
            let c = xv.cols();
            accumulate(grads, *x, xv.shape(), |dx| {
                for (i, &v) in gd.iter().enumerate() {
                    dx[i * c + j] += v;
                }
            });
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Key row `s` is visible from query column `t` when `t − window < s ≤ t`.
#[inline]
pub(crate) fn visible(s: usize, t: usize, window: usize) -> bool {
    s <= t && t - s < window
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log σ(x)` without overflow: `min(x, 0) − ln(1 + e^{−|x|})`.
pub(crate) fn log_sigmoid<T: Scalar>(x: T) -> T {
    x.min(T::zero()) - (-x.abs()).exp().ln_1p()
}

/// Visit flat index sets of every softmax slice along `axis`.
fn for_each_slice(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    match (shape.len(), axis) {
        (1, _) => f(&(0..shape[0]).collect::<Vec<_>>()),
        (2, 1) => {
            for i in 0..shape[0] {
                f(&(i * shape[1]..(i + 1) * shape[1]).collect::<Vec<_>>());
            }
        }
        _ => {
            let (r, c) = (shape[0], shape[1]);
            for j in 0..c {
                f(&(0..r).map(|i| i * c + j).collect::<Vec<_>>());
            }
        }
    }
}

/// Gradients of a loss with respect to every recorded node.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `var`; nodes the loss does not depend on get zeros.
    pub fn wrt(&self, var: Var<'_, T>) -> Tensor<T> {
        self.grads[var.id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.id]))
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Value of a single-element var.
    pub fn item(&self) -> T {
        self.value().item()
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        self.tape.push(value, op)
    }

    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let out = super::ops::matmul(&self.value(), &rhs.value())?;
        Ok(self.push(out, Op::MatMul(self.id, rhs.id)))
    }

    pub fn t(self) -> Var<'t, T> {
        let out = super::ops::transpose(&self.value());
        self.push(out, Op::Transpose(self.id))
    }

    fn zip_with(self, rhs: Var<'t, T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (a, b) = (self.value(), rhs.value());
        a.same_shape(&b, op)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(a.shape(), data)
    }

    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let out = self.zip_with(rhs, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(self.id, rhs.id)))
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let out = self.zip_with(rhs, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(self.id, rhs.id)))
    }

    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let out = self.zip_with(rhs, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(self.id, rhs.id)))
    }

    /// Add a length-`m` bias to every column of an `m × n` matrix (or to an
    /// `m`-vector).
    pub fn add_bias(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let (x, b) = (self.value(), bias.value());
        let m = x.rows();
        if b.ndim() != 1 || b.len() != m || x.ndim() == 0 {
            return Err(Error::Shape {
                op: "add_bias",
                left: x.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let n = x.cols();
        let mut out = x.clone();
        for (i, row) in out.data_mut().chunks_mut(n).enumerate() {
            for v in row {
                *v += b.data()[i];
            }
        }
        drop((x, b));
        Ok(self.push(
            out,
            Op::AddColBias {
                x: self.id,
                bias: bias.id,
            },
        ))
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        let out = self.value().scaled(c);
        self.push(out, Op::Scale(self.id, c))
    }

    pub fn neg(self) -> Var<'t, T> {
        self.scale(-T::one())
    }

    pub fn sum(self) -> Var<'t, T> {
        let s = self.value().sum();
        self.push(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = lit::<T>(self.value().len() as f64);
        self.sum().scale(T::one() / n)
    }

    pub fn gelu(self) -> Var<'t, T> {
        let out = self.value().map(gelu_scalar);
        self.push(out, Op::Gelu(self.id))
    }

    /// Column-wise LayerNorm of a `d × T` matrix (or a `d`-vector).
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        let x = self.value();
        let (d, t) = (x.rows(), x.cols());
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [d] || bv.shape() != [d] || d == 0 {
            return Err(Error::Shape {
                op: "layer_norm",
                left: x.shape().to_vec(),
                right: gv.shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(x.shape());
        let mut xhat = vec![T::zero(); d * t];
        let mut rstd = vec![T::zero(); t];
        for j in 0..t {
            let col = x.column(j);
            let (y, xh, r) = layer_norm_slice(&col, gv.data(), bv.data(), eps);
            out.set_column(j, &y);
            for i in 0..d {
                xhat[i * t + j] = xh[i];
            }
            rstd[j] = r;
        }
        drop((x, gv, bv));
        Ok(self.push(
            out,
            Op::LayerNormCols {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
        ))
    }

    /// Gather columns of a `d × V` table: column `j` of the result is
    /// column `tokens[j]` of `self`.
    pub fn embed_cols(self, tokens: &[usize]) -> Result<Var<'t, T>> {
        let table = self.value();
        let (d, v) = (table.rows(), table.cols());
        let t = tokens.len();
        let mut out = vec![T::zero(); d * t];
        for (j, &tok) in tokens.iter().enumerate() {
            if tok >= v {
                return Err(Error::Index {
                    what: "token",
                    index: tok,
                    size: v,
                });
            }
            for i in 0..d {
                out[i * t + j] = table.data()[i * v + tok];
            }
        }
        drop(table);
        let out = Tensor::from_vec(&[d, t], out)?;
        Ok(self.push(
            out,
            Op::EmbedCols {
                table: self.id,
                tokens: tokens.to_vec(),
            },
        ))
    }

    /// Rotate consecutive row pairs `(2p, 2p+1)` of each column `j` by the
    /// angle whose cosine/sine are `cos[p·T + j]`, `sin[p·T + j]`.
    pub fn rotate_pairs(self, cos: Vec<T>, sin: Vec<T>) -> Result<Var<'t, T>> {
        let x = self.value();
        let (rows, t) = (x.rows(), x.cols());
        if rows % 2 != 0 || cos.len() != rows / 2 * t || sin.len() != cos.len() {
            return Err(Error::Shape {
                op: "rotate_pairs",
                left: x.shape().to_vec(),
                right: vec![cos.len()],
            });
        }
        let xd = x.data();
        let mut out = vec![T::zero(); rows * t];
        for p in 0..rows / 2 {
            for j in 0..t {
                let (c, s) = (cos[p * t + j], sin[p * t + j]);
                let (a, b) = (xd[2 * p * t + j], xd[(2 * p + 1) * t + j]);
                out[2 * p * t + j] = a * c - b * s;
                out[(2 * p + 1) * t + j] = a * s + b * c;
            }
        }
        let out = Tensor::from_vec(x.shape(), out)?;
        drop(x);
        Ok(self.push(out, Op::RotatePairs { x: self.id, cos, sin }))
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if start + len > x.rows() {
            return Err(Error::Index {
                what: "row slice end",
                index: start + len,
                size: x.rows(),
            });
        }
        let n = x.cols();
        let data = x.data()[start * n..(start + len) * n].to_vec();
        let shape = if x.ndim() == 1 { vec![len] } else { vec![len, n] };
        let out = Tensor::from_vec(&shape, data)?;
        drop(x);
        Ok(self.push(out, Op::SliceRows { x: self.id, start }))
    }

    pub fn concat_rows(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows needs at least one part".into()))?;
        let n = first.value().cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = p.value();
            if v.cols() != n || v.ndim() != 2 {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: first.shape(),
                    right: v.shape().to_vec(),
                });
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::from_vec(&[rows, n], data)?;
        Ok(first.push(out, Op::ConcatRows(parts.iter().map(|p| p.id).collect())))
    }

    /// On a `T × T` score matrix indexed `(key s, query t)`, replace entries
    /// outside `t − window < s ≤ t` with `−∞`.
    pub fn causal_mask(self, window: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.ndim() != 2 || x.rows() != x.cols() {
            return Err(Error::Shape {
                op: "causal_mask",
                left: x.shape().to_vec(),
                right: vec![x.cols(), x.cols()],
            });
        }
        let t = x.cols();
        let mut out = x.clone();
        for s in 0..t {
            for c in 0..t {
                if !visible(s, c, window) {
                    out.data_mut()[s * t + c] = T::neg_infinity();
                }
            }
        }
        drop(x);
        Ok(self.push(out, Op::CausalMask { x: self.id, window }))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let out = super::ops::softmax(&self.value(), axis)?;
        Ok(self.push(out, Op::Softmax { x: self.id, axis }))
    }

    /// For logits `V × T`, return the vector of `log softmax(col_n)[target_n]`.
    pub fn log_softmax_gather(self, cols: &[usize], targets: &[usize]) -> Result<Var<'t, T>> {
        let lv = self.value();
        let (v, t) = (lv.rows(), lv.cols());
        if cols.len() != targets.len() {
            return Err(Error::Shape {
                op: "log_softmax_gather",
                left: vec![cols.len()],
                right: vec![targets.len()],
            });
        }
        let mut out = Vec::with_capacity(cols.len());
        let mut probs = Vec::with_capacity(cols.len() * v);
        for (&c, &tgt) in cols.iter().zip(targets) {
            if c >= t {
                return Err(Error::Index {
                    what: "logit column",
                    index: c,
                    size: t,
                });
            }
            if tgt >= v {
                return Err(Error::Index {
                    what: "target token",
                    index: tgt,
                    size: v,
                });
            }
            let col = lv.column(c);
            let lse = log_sum_exp(&col);
            if !lse.is_finite() {
                return Err(Error::Numeric("non-finite logits".into()));
            }
            out.push(col[tgt] - lse);
            probs.extend(col.iter().map(|&z| (z - lse).exp()));
        }
        let n = out.len();
        let out = Tensor::from_vec(&[n], out)?;
        drop(lv);
        Ok(self.push(
            out,
            Op::LogSoftmaxGather {
                logits: self.id,
                cols: cols.to_vec(),
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Mean next-token cross-entropy over the given `(column, target)` pairs.
    pub fn cross_entropy(self, cols: &[usize], targets: &[usize]) -> Result<Var<'t, T>> {
        Ok(self.log_softmax_gather(cols, targets)?.mean().neg())
    }

    /// `Σᵢ xᵢ cᵢ` against constant coefficients.
    pub fn dot_const(self, coeffs: &[T]) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.len() != coeffs.len() {
            return Err(Error::Shape {
                op: "dot_const",
                left: x.shape().to_vec(),
                right: vec![coeffs.len()],
            });
        }
        let s: T = x.data().iter().zip(coeffs).map(|(&a, &b)| a * b).sum();
        drop(x);
        Ok(self.push(
            Tensor::scalar(s),
            Op::DotConst {
                x: self.id,
                coeffs: coeffs.to_vec(),
            },
        ))
    }

    pub fn log_sigmoid(self) -> Var<'t, T> {
        let out = self.value().map(log_sigmoid);
        self.push(out, Op::LogSigmoid(self.id))
    }

    pub fn column(self, j: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if j >= x.cols() || x.ndim() != 2 {
            return Err(Error::Index {
                what: "column",
                index: j,
                size: x.cols(),
            });
        }
        let out = Tensor::from_vec(&[x.rows()], x.column(j))?;
        drop(x);
        Ok(self.push(out, Op::Column { x: self.id, j }))
    }
}
