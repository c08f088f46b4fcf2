//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive applied to its [`Var`] handles. Nodes
//! are appended in evaluation order, so the node index is already a
//! topological order and the reverse sweep simply walks the tape backwards.
//!
//! Persistent parameters live in [`Variable`]s outside any tape. A training
//! step binds them onto a fresh tape with [`Tape::param`], runs the forward
//! pass, calls [`Tape::backward`] and folds the resulting [`Gradients`] back
//! into the variables with [`Gradients::accumulate_into`]. Accumulation is
//! additive; call [`Variable::zero_grad`] between steps.
//!
//! [`Tape::pullback`] runs a seeded sweep without consuming the tape, which
//! is what vector-Jacobian products need: one forward pass, several probes.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Affine(usize, usize, usize),
    Tanh(usize),
    Softplus(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Sqrt(usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    Concat(usize, usize),
    SliceCols(usize, usize, usize),
    SliceRows(usize, usize, usize),
    RowNorm(usize),
    ClampMin(usize, f64),
    ScaleRows(usize, usize),
    DivRows(usize, usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    closed: bool,
}

/// Ordered record of primitive operations.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<Inner>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl core::fmt::Debug for Var {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by a reverse sweep, indexed by tape node.
pub struct Gradients {
    tape: Tape,
    grads: Vec<Option<Tensor>>,
}

impl core::fmt::Debug for Gradients {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let filled = self.grads.iter().filter(|g| g.is_some()).count();
        f.debug_struct("Gradients").field("filled", &filled).finish()
    }
}

/// A persistent tensor with a gradient slot, e.g. a model weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Variable {
    value: Tensor,
    grad: Tensor,
    requires_grad: bool,
}

impl Variable {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            value,
            grad,
            requires_grad: true,
        }
    }

    /// A variable excluded from differentiation.
    pub fn frozen(value: Tensor) -> Self {
        Self {
            requires_grad: false,
            ..Self::new(value)
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    /// Replaces the value, keeping the shape.
    pub fn set_value(&mut self, value: Tensor) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(self.value.mismatch("set_value", &value));
        }
        self.value = value;
        Ok(())
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut Tensor, &Tensor) {
        (&mut self.value, &self.grad)
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn accumulate_grad(&mut self, g: &Tensor) -> Result<()> {
        if g.shape() != self.grad.shape() {
            return Err(self.grad.mismatch("accumulate_grad", g));
        }
        for (a, b) in self.grad.data_mut().iter_mut().zip(g.data()) {
            *a += b;
        }
        Ok(())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_closed(&self) -> bool {
        self.inner.borrow().closed
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable leaf.
    pub fn leaf(&self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true, "leaf")
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// Binds a persistent variable as a leaf.
    pub fn param(&self, var: &Variable) -> Result<Var> {
        self.push(var.value.clone(), Op::Leaf, var.requires_grad, "param")
    }

    /// Reverse sweep from a scalar loss. Closes the tape.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        self.owns(loss)?;
        if self.is_closed() {
            return Err(Error::TapeClosed);
        }
        let value = loss.value();
        if value.len() != 1 {
            return Err(Error::NotScalar {
                shape: value.shape().to_vec(),
            });
        }
        let seed = Tensor::filled(value.shape(), 1.0);
        let grads = self.sweep(loss.id, seed)?;
        self.inner.borrow_mut().closed = true;
        Ok(grads)
    }

    /// Seeded reverse sweep `seedᵀ · ∂output/∂leaves`; leaves the tape open.
    pub fn pullback(&self, output: &Var, seed: &Tensor) -> Result<Gradients> {
        self.owns(output)?;
        if self.is_closed() {
            return Err(Error::TapeClosed);
        }
        let value = output.value();
        if value.shape() != seed.shape() {
            return Err(value.mismatch("pullback", seed));
        }
        self.sweep(output.id, seed.clone())
    }

    fn owns(&self, var: &Var) -> Result<()> {
        if Rc::ptr_eq(&self.inner, &var.tape.inner) {
            Ok(())
        } else {
            Err(Error::ForeignVariable)
        }
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        let mut inner = self.inner.borrow_mut();
        if inner.closed {
            return Err(Error::TapeClosed);
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        inner.nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self.clone(),
            id: inner.nodes.len() - 1,
        })
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.inner.borrow().nodes[id].value.clone()
    }

    fn grad_flag(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    fn sweep(&self, out: usize, seed: Tensor) -> Result<Gradients> {
        let inner = self.inner.borrow();
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        if nodes[out].requires_grad {
            grads[out] = Some(seed);
        }
        for id in (0..=out).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let y = &node.value;
            let val = |i: usize| -> &Tensor { &nodes[i].value };
            let mut send = |i: usize, contrib: Tensor| {
                if !nodes[i].requires_grad {
                    return;
                }
                match &mut grads[i] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(contrib.data())
                        .for_each(|(a, b)| *a += b),
                    slot => *slot = Some(contrib),
                }
            };
            match node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    send(a, reduce_to(&g, val(a).shape()));
                    send(b, reduce_to(&g, val(b).shape()));
                }
                Op::Sub(a, b) => {
                    send(a, reduce_to(&g, val(a).shape()));
                    send(b, reduce_to(&g.map(|v| -v), val(b).shape()));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(a), val(b));
                    let bb = broadcast_to(bv, g.shape());
                    let ab = broadcast_to(av, g.shape());
                    send(a, reduce_to(&g.zip_map(&bb, |g, b| g * b)?, av.shape()));
                    send(b, reduce_to(&g.zip_map(&ab, |g, a| g * a)?, bv.shape()));
                }
                Op::Div(a, b) => {
                    let (av, bv) = (val(a), val(b));
                    let bb = broadcast_to(bv, g.shape());
                    let ab = broadcast_to(av, g.shape());
                    send(a, reduce_to(&g.zip_map(&bb, |g, b| g / b)?, av.shape()));
                    let gb: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(ab.data())
                        .zip(bb.data())
                        .map(|((g, a), b)| -g * a / (b * b))
                        .collect();
                    let gb = Tensor::new(g.shape().to_vec(), gb)?;
                    send(b, reduce_to(&gb, bv.shape()));
                }
                Op::Neg(a) => send(a, g.map(|v| -v)),
                Op::Scale(a, c) => send(a, g.map(|v| v * c)),
                Op::AddScalar(a) => send(a, g),
                Op::MatMul(a, b) => {
                    send(a, g.matmul_t(val(b))?);
                    send(b, val(a).t_matmul(&g)?);
                }
                Op::Affine(x, w, b) => {
                    send(x, g.matmul_t(val(w))?);
                    send(w, val(x).t_matmul(&g)?);
                    send(b, column_sums(&g));
                }
                Op::Tanh(a) => send(a, g.zip_map(y, |g, y| g * (1.0 - y * y))?),
                Op::Softplus(a) => send(a, g.zip_map(val(a), |g, x| g * math::sigmoid(x))?),
                Op::Exp(a) => send(a, g.zip_map(y, |g, y| g * y)?),
                Op::Log(a) => send(a, g.zip_map(val(a), |g, x| g / x)?),
                Op::Square(a) => send(a, g.zip_map(val(a), |g, x| 2.0 * g * x)?),
                Op::Sqrt(a) => send(a, g.zip_map(y, |g, y| g / (2.0 * y))?),
                Op::Sum(a) => send(a, Tensor::filled(val(a).shape(), g.item())),
                Op::Mean(a) => {
                    let n = val(a).len() as f64;
                    send(a, Tensor::filled(val(a).shape(), g.item() / n));
                }
                Op::SumRows(a) => {
                    let av = val(a);
                    let c = av.cols();
                    let data = g.data().iter().flat_map(|&gi| core::iter::repeat_n(gi, c));
                    send(a, Tensor::new(av.shape().to_vec(), data.collect())?);
                }
                Op::Concat(a, b) => {
                    let (p, q) = (val(a).cols(), val(b).cols());
                    let rows = g.rows();
                    let mut ga = Vec::with_capacity(rows * p);
                    let mut gb = Vec::with_capacity(rows * q);
                    for r in 0..rows {
                        let row = g.row(r);
                        ga.extend_from_slice(&row[..p]);
                        gb.extend_from_slice(&row[p..]);
                    }
                    send(a, Tensor::matrix(rows, p, ga)?);
                    send(b, Tensor::matrix(rows, q, gb)?);
                }
                Op::SliceCols(a, start, end) => {
                    let av = val(a);
                    let mut ga = Tensor::zeros(av.shape());
                    let w = end - start;
                    for r in 0..av.rows() {
                        ga.row_mut(r)[start..end].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                    }
                    send(a, ga);
                }
                Op::SliceRows(a, start, end) => {
                    let av = val(a);
                    let mut ga = Tensor::zeros(av.shape());
                    let c = av.cols();
                    ga.data_mut()[start * c..end * c].copy_from_slice(g.data());
                    send(a, ga);
                }
                Op::RowNorm(a) => {
                    let av = val(a);
                    let mut ga = Tensor::zeros(av.shape());
                    for r in 0..av.rows() {
                        let n = y.data()[r];
                        if n > 0.0 {
                            let s = g.data()[r] / n;
                            for (o, x) in ga.row_mut(r).iter_mut().zip(av.row(r)) {
                                *o = s * x;
                            }
                        }
                    }
                    send(a, ga);
                }
                Op::ClampMin(a, c) => {
                    send(a, g.zip_map(val(a), |g, x| if x > c { g } else { 0.0 })?)
                }
                Op::ScaleRows(x, s) => {
                    let (xv, sv) = (val(x), val(s));
                    let mut gx = g.clone();
                    let mut gs = vec![0.0; sv.len()];
                    for r in 0..xv.rows() {
                        let sr = sv.data()[r];
                        gs[r] = g.row(r).iter().zip(xv.row(r)).map(|(g, x)| g * x).sum();
                        gx.row_mut(r).iter_mut().for_each(|v| *v *= sr);
                    }
                    send(x, gx);
                    send(s, Tensor::new(sv.shape().to_vec(), gs)?);
                }
                Op::DivRows(x, s) => {
                    let (xv, sv) = (val(x), val(s));
                    let mut gx = g.clone();
                    let mut gs = vec![0.0; sv.len()];
                    for r in 0..xv.rows() {
                        let sr = sv.data()[r];
                        let dot: f64 = g.row(r).iter().zip(xv.row(r)).map(|(g, x)| g * x).sum();
                        gs[r] = -dot / (sr * sr);
                        gx.row_mut(r).iter_mut().for_each(|v| *v /= sr);
                    }
                    send(x, gx);
                    send(s, Tensor::new(sv.shape().to_vec(), gs)?);
                }
            }
        }
        drop(inner);
        Ok(Gradients {
            tape: self.clone(),
            grads,
        })
    }
}

impl Gradients {
    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        if !Rc::ptr_eq(&self.tape.inner, &var.tape.inner) {
            return None;
        }
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `var`, zeros when it was unreachable.
    pub fn get_or_zeros(&self, var: &Var) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }

    /// Adds the gradient for `var` into `target.grad`.
    pub fn accumulate_into(&self, var: &Var, target: &mut Variable) -> Result<()> {
        if let Some(g) = self.get(var) {
            target.accumulate_grad(g)?;
        }
        Ok(())
    }
}

/// Vector-Jacobian product `vᵀ · ∂f/∂x` without materializing the Jacobian.
pub fn vjp<F>(f: F, x: &Tensor, v: &Tensor) -> Result<Tensor>
where
    F: FnOnce(&Tape, &Var) -> Result<Var>,
{
    let tape = Tape::new();
    let xv = tape.leaf(x.clone())?;
    let y = f(&tape, &xv)?;
    let grads = tape.pullback(&y, v)?;
    Ok(grads.get_or_zeros(&xv))
}

#[derive(Clone, Copy)]
enum Bcast {
    Same,
    Rhs,
    Lhs,
}

fn is_scalar_like(t: &Tensor) -> bool {
    t.len() == 1 && t.ndim() <= 1
}

/// Shape relation for binary ops: equal shapes, a scalar operand, or one
/// operand matching the other minus its leading batch dimension.
fn broadcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(Bcast, Vec<usize>)> {
    if a.shape() == b.shape() {
        Ok((Bcast::Same, a.shape().to_vec()))
    } else if is_scalar_like(b) || (a.ndim() >= 2 && &a.shape()[1..] == b.shape()) {
        Ok((Bcast::Rhs, a.shape().to_vec()))
    } else if is_scalar_like(a) || (b.ndim() >= 2 && &b.shape()[1..] == a.shape()) {
        Ok((Bcast::Lhs, b.shape().to_vec()))
    } else {
        Err(a.mismatch(op, b))
    }
}

fn broadcast_to(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape() == shape {
        return t.clone();
    }
    let len: usize = shape.iter().product();
    let src = t.data();
    let data = (0..len).map(|i| src[i % src.len()]).collect();
    Tensor::new(shape.to_vec(), data).expect("broadcast shape")
}

fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let len: usize = shape.iter().product::<usize>().max(1);
    let mut out = vec![0.0; len];
    for (i, v) in g.data().iter().enumerate() {
        out[i % len] += v;
    }
    Tensor::new(shape.to_vec(), out).expect("reduce shape")
}

fn column_sums(g: &Tensor) -> Tensor {
    let c = g.cols();
    let mut out = vec![0.0; c];
    for r in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    Tensor::vector(out)
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.ndim() != 2 {
        return Err(Error::Shape {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl Var {
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.grad_flag(self.id)
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    fn unary(&self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        self.tape.push(value, op, self.requires_grad(), name)
    }

    fn binary(&self, other: &Var, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        self.tape.owns(other)?;
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg, name)
    }

    fn elementwise(
        &self,
        other: &Var,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (a, b) = (self.value(), other.value());
        let (kind, shape) = broadcast(name, &a, &b)?;
        let data = match kind {
            Bcast::Same => a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Rhs => {
                let bl = b.len();
                a.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, b.data()[i % bl]))
                    .collect()
            }
            Bcast::Lhs => {
                let al = a.len();
                b.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &y)| f(a.data()[i % al], y))
                    .collect()
            }
        };
        self.binary(other, name, Tensor::new(shape, data)?, op)
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.elementwise(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.elementwise(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.elementwise(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        self.elementwise(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn neg(&self) -> Result<Var> {
        self.unary("neg", self.value().map(|v| -v), Op::Neg(self.id))
    }

    pub fn scale(&self, c: f64) -> Result<Var> {
        self.unary("scale", self.value().map(|v| v * c), Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var> {
        self.unary("add_scalar", self.value().map(|v| v + c), Op::AddScalar(self.id))
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        let value = self.value().matmul(&other.value())?;
        self.binary(other, "matmul", value, Op::MatMul(self.id, other.id))
    }

    /// `x · w + b` with `x: [n,k]`, `w: [k,m]`, `b: [m]`.
    pub fn affine(&self, w: &Var, b: &Var) -> Result<Var> {
        self.tape.owns(w)?;
        self.tape.owns(b)?;
        let (xv, wv, bv) = (self.value(), w.value(), b.value());
        let mut out = xv.matmul(&wv)?;
        let m = out.cols();
        if bv.shape() != [m] {
            return Err(out.mismatch("affine", &bv));
        }
        for r in 0..out.rows() {
            for (o, bias) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += bias;
            }
        }
        let rg = self.requires_grad() || w.requires_grad() || b.requires_grad();
        self.tape
            .push(out, Op::Affine(self.id, w.id, b.id), rg, "affine")
    }

    pub fn tanh(&self) -> Result<Var> {
        self.unary("tanh", self.value().map(math::tanh), Op::Tanh(self.id))
    }

    pub fn softplus(&self) -> Result<Var> {
        self.unary("softplus", self.value().map(math::softplus), Op::Softplus(self.id))
    }

    pub fn exp(&self) -> Result<Var> {
        self.unary("exp", self.value().map(math::exp), Op::Exp(self.id))
    }

    pub fn log(&self) -> Result<Var> {
        self.unary("log", self.value().map(math::ln), Op::Log(self.id))
    }

    pub fn square(&self) -> Result<Var> {
        self.unary("square", self.value().map(|v| v * v), Op::Square(self.id))
    }

    pub fn sqrt(&self) -> Result<Var> {
        self.unary("sqrt", self.value().map(math::sqrt), Op::Sqrt(self.id))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&self) -> Result<Var> {
        self.unary("sum", Tensor::scalar(self.value().sum()), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Result<Var> {
        let v = self.value();
        let mean = v.sum() / v.len() as f64;
        self.unary("mean", Tensor::scalar(mean), Op::Mean(self.id))
    }

    /// Per-row sums of a matrix: `[n,c] -> [n]`.
    pub fn sum_rows(&self) -> Result<Var> {
        let v = self.value();
        let (n, _) = require_matrix("sum_rows", &v)?;
        let data = (0..n).map(|r| v.row(r).iter().sum()).collect();
        self.unary("sum_rows", Tensor::vector(data), Op::SumRows(self.id))
    }

    /// Column-wise concatenation of two matrices with equal row counts.
    pub fn concat(&self, other: &Var) -> Result<Var> {
        let (a, b) = (self.value(), other.value());
        let (n, p) = require_matrix("concat", &a)?;
        let (n2, q) = require_matrix("concat", &b)?;
        if n != n2 {
            return Err(a.mismatch("concat", &b));
        }
        let mut data = Vec::with_capacity(n * (p + q));
        for r in 0..n {
            data.extend_from_slice(a.row(r));
            data.extend_from_slice(b.row(r));
        }
        let value = Tensor::matrix(n, p + q, data)?;
        self.binary(other, "concat", value, Op::Concat(self.id, other.id))
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var> {
        let v = self.value();
        let (n, c) = require_matrix("slice_cols", &v)?;
        if start >= end || end > c {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: v.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let mut data = Vec::with_capacity(n * (end - start));
        for r in 0..n {
            data.extend_from_slice(&v.row(r)[start..end]);
        }
        let value = Tensor::matrix(n, end - start, data)?;
        self.unary("slice_cols", value, Op::SliceCols(self.id, start, end))
    }

    /// Rows `[start, end)` of a matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var> {
        let v = self.value();
        let (n, _) = require_matrix("slice_rows", &v)?;
        if start >= end || end > n {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: v.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let value = v.slice_rows(start, end);
        self.unary("slice_rows", value, Op::SliceRows(self.id, start, end))
    }

    /// Euclidean norm of each row: `[n,c] -> [n]`.
    pub fn row_norm(&self) -> Result<Var> {
        let v = self.value();
        let (n, _) = require_matrix("row_norm", &v)?;
        let data = (0..n)
            .map(|r| math::sqrt(v.row(r).iter().map(|x| x * x).sum()))
            .collect();
        self.unary("row_norm", Tensor::vector(data), Op::RowNorm(self.id))
    }

    /// Elementwise `max(x, floor)`.
    pub fn clamp_min(&self, floor: f64) -> Result<Var> {
        let value = self.value().map(|v| v.max(floor));
        self.unary("clamp_min", value, Op::ClampMin(self.id, floor))
    }

    fn row_op(&self, s: &Var, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (x, sv) = (self.value(), s.value());
        let (n, _) = require_matrix(name, &x)?;
        if sv.shape() != [n] {
            return Err(x.mismatch(name, &sv));
        }
        let mut out = (*x).clone();
        for r in 0..n {
            let sr = sv.data()[r];
            out.row_mut(r).iter_mut().for_each(|v| *v = f(*v, sr));
        }
        self.binary(s, name, out, op)
    }

    /// Multiplies row `i` of `[n,c]` by `s[i]`.
    pub fn scale_rows(&self, s: &Var) -> Result<Var> {
        self.row_op(s, "scale_rows", Op::ScaleRows(self.id, s.id), |v, s| v * s)
    }

    /// Divides row `i` of `[n,c]` by `s[i]`.
    pub fn div_rows(&self, s: &Var) -> Result<Var> {
        self.row_op(s, "div_rows", Op::DivRows(self.id, s.id), |v, s| v / s)
    }
}
