//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every operation on a [`Var`] appends a node holding its value and the ids
//! of its inputs. Because nodes are only ever appended, append order is a
//! topological order and [`Tape::backward`] is a single reverse sweep.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::broadcast::{broadcast_shape, for_each_index};
use crate::error::{Result, TensorError};
use crate::tensor::{gemm, log_sum_exp, sign, Tensor};

/// Floor applied to variances: `exp(log_var) >= 1e-8`.
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// `ln(VARIANCE_FLOOR)`.
pub fn log_variance_floor() -> f64 {
    VARIANCE_FLOOR.ln()
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MatMul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sqrt(usize),
    Square(usize),
    Abs(usize),
    Sign(usize),
    Clip(usize, f64, f64),
    Softmax(usize),
    LogSoftmax(usize),
    LogSumExp(usize),
    Sum(usize),
    SumLast(usize),
    Mean(usize),
    Reshape(usize),
    TransposeLast2(usize),
    SelectRows(usize, Rc<[usize]>),
    SliceLast(usize, usize, usize),
    ConcatLast(Vec<usize>),
    Gather(usize, Rc<[usize]>),
    MaxExcluding(usize, Vec<usize>),
    GaussianLogDensity(usize, usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// An append-only record of tensor operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// A handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Registers an input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Constant, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn owns(&self, v: Var<'_>) -> bool {
        std::ptr::eq(self, v.tape)
    }

    /// Concatenates tensors along their last axis; leading shapes must agree.
    pub fn concat_last<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or(TensorError::InvalidArgument {
            op: "concat_last",
            reason: "no inputs".into(),
        })?;
        let lead: Vec<usize> = {
            let s = first.shape();
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        for (p, v) in parts.iter().zip(&values) {
            if !self.owns(*p) {
                return Err(TensorError::ForeignVariable);
            }
            let s = v.shape();
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_last",
                    lhs: first.shape(),
                    rhs: s.to_vec(),
                });
            }
        }
        let rows: usize = lead.iter().product();
        let width: usize = values.iter().map(|v| v.last_dim()).sum();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row(r));
            }
        }
        let mut shape = lead;
        shape.push(width);
        let rg = parts.iter().any(|p| p.requires_grad());
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(self.push(Tensor::new(shape, data)?, Op::ConcatLast(ids), rg))
    }

    /// Exact reverse-mode gradients of a scalar `loss` with respect to every
    /// node on this tape. The tape cannot be differentiated twice.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !self.owns(loss) {
            return Err(TensorError::ForeignVariable);
        }
        if self.consumed.get() {
            return Err(TensorError::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let loss_value = &nodes[loss.id].value;
        if loss_value.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: loss_value.shape().to_vec(),
            });
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(loss_value.shape().to_vec(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf | Op::Constant) {
                grads[id] = Some(g);
                continue;
            }
            let out = &node.value;
            let mut send = |target: usize, grad: Tensor| {
                if nodes[target].requires_grad {
                    accumulate(&mut grads[target], grad);
                }
            };
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf | Op::Constant => unreachable!("handled above"),
                Op::Add(a, b) => {
                    send(*a, reduce_to(&g, val(*a).shape(), 1.0));
                    send(*b, reduce_to(&g, val(*b).shape(), 1.0));
                }
                Op::Sub(a, b) => {
                    send(*a, reduce_to(&g, val(*a).shape(), 1.0));
                    send(*b, reduce_to(&g, val(*b).shape(), -1.0));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let mut ga = vec![0.0; va.len()];
                    let mut gb = vec![0.0; vb.len()];
                    for_each_index(out.shape(), va.shape(), vb.shape(), |o, ia, ib| {
                        ga[ia] += g.data()[o] * vb.data()[ib];
                        gb[ib] += g.data()[o] * va.data()[ia];
                    });
                    send(*a, Tensor::new(va.shape().to_vec(), ga)?);
                    send(*b, Tensor::new(vb.shape().to_vec(), gb)?);
                }
                Op::Div(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let mut ga = vec![0.0; va.len()];
                    let mut gb = vec![0.0; vb.len()];
                    for_each_index(out.shape(), va.shape(), vb.shape(), |o, ia, ib| {
                        let d = vb.data()[ib];
                        ga[ia] += g.data()[o] / d;
                        gb[ib] -= g.data()[o] * va.data()[ia] / (d * d);
                    });
                    send(*a, Tensor::new(va.shape().to_vec(), ga)?);
                    send(*b, Tensor::new(vb.shape().to_vec(), gb)?);
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                    if nodes[*a].requires_grad {
                        let mut ga = vec![0.0; m * k];
                        gemm(m, n, k, g.data(), false, vb.data(), true, &mut ga, 0.0);
                        send(*a, Tensor::new(vec![m, k], ga)?);
                    }
                    if nodes[*b].requires_grad {
                        let mut gb = vec![0.0; k * n];
                        gemm(k, m, n, va.data(), true, g.data(), false, &mut gb, 0.0);
                        send(*b, Tensor::new(vec![k, n], gb)?);
                    }
                }
                Op::Neg(a) => send(*a, g.map(|v| -v)),
                Op::Scale(a, s) => send(*a, g.map(|v| v * s)),
                Op::AddScalar(a) => send(*a, g),
                Op::Relu(a) => send(*a, g.zip_map(val(*a), |g, x| if x > 0.0 { g } else { 0.0 })?),
                Op::Exp(a) => send(*a, g.zip_map(out, |g, y| g * y)?),
                Op::Log(a) => send(*a, g.zip_map(val(*a), |g, x| g / x)?),
                Op::Tanh(a) => send(*a, g.zip_map(out, |g, y| g * (1.0 - y * y))?),
                Op::Sqrt(a) => send(
                    *a,
                    g.zip_map(out, |g, y| if y > 0.0 { g / (2.0 * y) } else { 0.0 })?,
                ),
                Op::Square(a) => send(*a, g.zip_map(val(*a), |g, x| 2.0 * x * g)?),
                Op::Abs(a) => send(*a, g.zip_map(val(*a), |g, x| sign(x) * g)?),
                Op::Sign(a) => send(*a, Tensor::zeros(val(*a).shape().to_vec())),
                Op::Clip(a, lo, hi) => send(
                    *a,
                    g.zip_map(val(*a), |g, x| if x > *lo && x < *hi { g } else { 0.0 })?,
                ),
                Op::Softmax(a) => {
                    let c = out.last_dim();
                    let mut ga = vec![0.0; out.len()];
                    for r in 0..out.rows() {
                        let y = out.row(r);
                        let gr = &g.data()[r * c..(r + 1) * c];
                        let dot: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for i in 0..c {
                            ga[r * c + i] = y[i] * (gr[i] - dot);
                        }
                    }
                    send(*a, Tensor::new(out.shape().to_vec(), ga)?);
                }
                Op::LogSoftmax(a) => {
                    send(*a, log_softmax_backward(out, &g)?);
                }
                Op::LogSumExp(a) => {
                    let x = val(*a);
                    let c = x.last_dim();
                    let mut ga = vec![0.0; x.len()];
                    for r in 0..x.rows() {
                        let row = x.row(r);
                        let lse = out.data()[r];
                        for i in 0..c {
                            let p = if lse.is_finite() { (row[i] - lse).exp() } else { 0.0 };
                            ga[r * c + i] = g.data()[r] * p;
                        }
                    }
                    send(*a, Tensor::new(x.shape().to_vec(), ga)?);
                }
                Op::Sum(a) => send(*a, Tensor::full(val(*a).shape().to_vec(), g.data()[0])),
                Op::Mean(a) => {
                    let n = val(*a).len().max(1) as f64;
                    send(*a, Tensor::full(val(*a).shape().to_vec(), g.data()[0] / n));
                }
                Op::SumLast(a) => {
                    let x = val(*a);
                    let c = x.last_dim();
                    let ga = (0..x.len()).map(|i| g.data()[i / c]).collect();
                    send(*a, Tensor::new(x.shape().to_vec(), ga)?);
                }
                Op::Reshape(a) => send(*a, g.reshape(val(*a).shape().to_vec())?),
                Op::TransposeLast2(a) => send(*a, transpose_last2(&g)),
                Op::SelectRows(a, idx) => {
                    let x = val(*a);
                    let w = if x.shape()[0] == 0 { 0 } else { x.len() / x.shape()[0] };
                    let mut ga = vec![0.0; x.len()];
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..w {
                            ga[src * w + j] += g.data()[r * w + j];
                        }
                    }
                    send(*a, Tensor::new(x.shape().to_vec(), ga)?);
                }
                Op::SliceLast(a, start, end) => {
                    let x = val(*a);
                    let c = x.last_dim();
                    let w = end - start;
                    let mut ga = vec![0.0; x.len()];
                    for r in 0..x.rows() {
                        ga[r * c + start..r * c + end].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                    }
                    send(*a, Tensor::new(x.shape().to_vec(), ga)?);
                }
                Op::ConcatLast(parts) => {
                    let width = out.last_dim();
                    let mut offset = 0;
                    for &p in parts {
                        let x = val(p);
                        let c = x.last_dim();
                        let mut gp = vec![0.0; x.len()];
                        for r in 0..out.rows() {
                            gp[r * c..(r + 1) * c]
                                .copy_from_slice(&g.data()[r * width + offset..r * width + offset + c]);
                        }
                        offset += c;
                        send(p, Tensor::new(x.shape().to_vec(), gp)?);
                    }
                }
                Op::Gather(a, idx) => {
                    let x = val(*a);
                    let c = x.last_dim();
                    let mut ga = vec![0.0; x.len()];
                    for (r, &j) in idx.iter().enumerate() {
                        ga[r * c + j] = g.data()[r];
                    }
                    send(*a, Tensor::new(x.shape().to_vec(), ga)?);
                }
                Op::MaxExcluding(a, arg) => {
                    let x = val(*a);
                    let c = x.last_dim();
                    let mut ga = vec![0.0; x.len()];
                    for (r, &j) in arg.iter().enumerate() {
                        ga[r * c + j] = g.data()[r];
                    }
                    send(*a, Tensor::new(x.shape().to_vec(), ga)?);
                }
                Op::GaussianLogDensity(x, mean, log_var) => {
                    let (vx, vm, vl) = (val(*x), val(*mean), val(*log_var));
                    let c = vx.last_dim();
                    let floor = log_variance_floor();
                    let n = vx.len();
                    let (mut gx, mut gm, mut gl) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
                    for i in 0..n {
                        let go = g.data()[i / c];
                        let lv = vl.data()[i].max(floor);
                        let var = lv.exp();
                        let diff = vx.data()[i] - vm.data()[i];
                        gx[i] = -go * diff / var;
                        gm[i] = go * diff / var;
                        if vl.data()[i] > floor {
                            gl[i] = go * (-0.5 + 0.5 * diff * diff / var);
                        }
                    }
                    let shape = vx.shape().to_vec();
                    send(*x, Tensor::new(shape.clone(), gx)?);
                    send(*mean, Tensor::new(shape.clone(), gm)?);
                    send(*log_var, Tensor::new(shape, gl)?);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(slot: &mut Option<Tensor>, grad: Tensor) {
    match slot {
        Some(acc) => {
            for (a, g) in acc.data_mut().iter_mut().zip(grad.data()) {
                *a += g;
            }
        }
        None => *slot = Some(grad),
    }
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to(g: &Tensor, shape: &[usize], scale: f64) -> Tensor {
    if g.shape() == shape {
        return if scale == 1.0 { g.clone() } else { g.map(|v| v * scale) };
    }
    let mut acc = Tensor::zeros(shape.to_vec());
    let data = acc.data_mut();
    for_each_index(g.shape(), g.shape(), shape, |o, _, ib| {
        data[ib] += scale * g.data()[o];
    });
    acc
}

fn transpose_last2(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
    let batch = t.len() / (r * c).max(1);
    let mut data = vec![0.0; t.len()];
    for b in 0..batch {
        let base = b * r * c;
        for i in 0..r {
            for j in 0..c {
                data[base + j * r + i] = t.data()[base + i * c + j];
            }
        }
    }
    let mut shape = s.to_vec();
    let n = shape.len();
    shape.swap(n - 2, n - 1);
    Tensor::new(shape, data).expect("transpose preserves length")
}

/// Backward of a row-wise log-softmax. `1 - p_i` is summed from the other
/// probabilities so that saturated rows keep a nonzero gradient.
fn log_softmax_backward(out: &Tensor, g: &Tensor) -> Result<Tensor> {
    let c = out.last_dim();
    let mut ga = vec![0.0; out.len()];
    let mut p = vec![0.0; c];
    for r in 0..out.rows() {
        let y = out.row(r);
        let gr = &g.data()[r * c..(r + 1) * c];
        for i in 0..c {
            p[i] = y[i].exp();
        }
        let g_total: f64 = gr.iter().sum();
        for i in 0..c {
            let one_minus_p: f64 = if c <= 64 {
                (0..c).filter(|&j| j != i).map(|j| p[j]).sum()
            } else {
                1.0 - p[i]
            };
            let g_others = g_total - gr[i];
            ga[r * c + i] = gr[i] * one_minus_p - p[i] * g_others;
        }
    }
    Tensor::new(out.shape().to_vec(), ga)
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to the input `v` (a leaf); exactly
    /// zero when `v` has no path to the loss. Intermediate results are not
    /// retained.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        match self.grads.get(v.id).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(v.shape()),
        }
    }
}

fn unary_shape_op(name: &'static str, t: &Tensor) -> Result<()> {
    if t.ndim() == 0 {
        return Err(TensorError::InvalidArgument {
            op: name,
            reason: "requires at least one axis".into(),
        });
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// The value of a one-element variable.
    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op, self.requires_grad())
    }

    fn check_same_tape(&self, other: Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(TensorError::ForeignVariable)
        }
    }

    fn binary(
        &self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.check_same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| TensorError::ShapeMismatch {
            op: name,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })?;
        let total: usize = shape.iter().product();
        let mut data = vec![0.0; total];
        for_each_index(&shape, a.shape(), b.shape(), |o, ia, ib| {
            data[o] = f(a.data()[ia], b.data()[ib]);
        });
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(Tensor::new(shape, data)?, op, rg))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut c, 0.0);
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self
            .tape
            .push(Tensor::new(vec![m, n], c)?, Op::MatMul(self.id, other.id), rg))
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(self.value().map(|v| -v), Op::Neg(self.id))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.unary(self.value().map(|v| v * s), Op::Scale(self.id, s))
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t> {
        self.unary(self.value().map(|v| v + s), Op::AddScalar(self.id))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(self.value().map(|v| v.max(0.0)), Op::Relu(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(self.value().map(f64::exp), Op::Exp(self.id))
    }

    pub fn log(&self) -> Var<'t> {
        self.unary(self.value().map(f64::ln), Op::Log(self.id))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(self.value().map(f64::tanh), Op::Tanh(self.id))
    }

    /// Square root; the gradient at 0 is taken as 0.
    pub fn sqrt(&self) -> Var<'t> {
        self.unary(self.value().map(f64::sqrt), Op::Sqrt(self.id))
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(self.value().map(|v| v * v), Op::Square(self.id))
    }

    pub fn abs(&self) -> Var<'t> {
        self.unary(self.value().map(f64::abs), Op::Abs(self.id))
    }

    /// Elementwise sign (`sign(0) = 0`) with zero gradient everywhere.
    pub fn sign(&self) -> Var<'t> {
        self.unary(self.value().map(sign), Op::Sign(self.id))
    }

    /// Clamp into `[lo, hi]`; the gradient is passed only strictly inside.
    pub fn clip(&self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(self.value().map(|v| v.clamp(lo, hi)), Op::Clip(self.id, lo, hi))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&self) -> Result<Var<'t>> {
        let x = self.value();
        unary_shape_op("softmax", &x)?;
        let mut data = Vec::with_capacity(x.len());
        for r in 0..x.rows() {
            data.extend(crate::tensor::softmax(x.row(r)));
        }
        Ok(self.unary(Tensor::new(x.shape().to_vec(), data)?, Op::Softmax(self.id)))
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&self) -> Result<Var<'t>> {
        let x = self.value();
        unary_shape_op("log_softmax", &x)?;
        let mut data = Vec::with_capacity(x.len());
        for r in 0..x.rows() {
            let row = x.row(r);
            let lse = log_sum_exp(row);
            data.extend(row.iter().map(|v| v - lse));
        }
        Ok(self.unary(Tensor::new(x.shape().to_vec(), data)?, Op::LogSoftmax(self.id)))
    }

    /// `log Σ exp` over the last axis, dropping it.
    pub fn log_sum_exp(&self) -> Result<Var<'t>> {
        let x = self.value();
        unary_shape_op("log_sum_exp", &x)?;
        let data = (0..x.rows()).map(|r| log_sum_exp(x.row(r))).collect();
        let shape = x.shape()[..x.ndim() - 1].to_vec();
        Ok(self.unary(Tensor::new(shape, data)?, Op::LogSumExp(self.id)))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Var<'t> {
        self.unary(Tensor::scalar(self.value().sum()), Op::Sum(self.id))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&self) -> Var<'t> {
        let x = self.value();
        let n = x.len().max(1) as f64;
        self.unary(Tensor::scalar(x.sum() / n), Op::Mean(self.id))
    }

    /// Sum over the last axis, dropping it.
    pub fn sum_last(&self) -> Result<Var<'t>> {
        let x = self.value();
        unary_shape_op("sum_last", &x)?;
        let data = (0..x.rows()).map(|r| x.row(r).iter().sum()).collect();
        let shape = x.shape()[..x.ndim() - 1].to_vec();
        Ok(self.unary(Tensor::new(shape, data)?, Op::SumLast(self.id)))
    }

    /// Per-row L1 norm over the last axis.
    pub fn l1_norm_last(&self) -> Result<Var<'t>> {
        self.abs().sum_last()
    }

    /// Per-row L2 norm over the last axis.
    pub fn l2_norm_last(&self) -> Result<Var<'t>> {
        Ok(self.square().sum_last()?.sqrt())
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let x = self.value();
        let shape = shape.into();
        if shape.iter().product::<usize>() != x.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: x.shape().to_vec(),
                rhs: shape,
            });
        }
        Ok(self.unary(x.reshape(shape)?, Op::Reshape(self.id)))
    }

    /// Swaps the last two axes (a batched matrix transpose).
    pub fn transpose_last2(&self) -> Result<Var<'t>> {
        let x = self.value();
        if x.ndim() < 2 {
            return Err(TensorError::InvalidArgument {
                op: "transpose_last2",
                reason: format!("needs two axes, got {:?}", x.shape()),
            });
        }
        Ok(self.unary(transpose_last2(&x), Op::TransposeLast2(self.id)))
    }

    /// Gathers rows along the first axis; indices may repeat.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let out = x.select_rows(indices)?;
        Ok(self.unary(out, Op::SelectRows(self.id, indices.into())))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_last(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let x = self.value();
        let c = x.last_dim();
        if x.ndim() == 0 || start > end || end > c {
            return Err(TensorError::InvalidArgument {
                op: "slice_last",
                reason: format!("range {start}..{end} for shape {:?}", x.shape()),
            });
        }
        let mut data = Vec::with_capacity(x.rows() * (end - start));
        for r in 0..x.rows() {
            data.extend_from_slice(&x.row(r)[start..end]);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("non-scalar") = end - start;
        Ok(self.unary(Tensor::new(shape, data)?, Op::SliceLast(self.id, start, end)))
    }

    /// Picks entry `indices[r]` from row `r`; the last axis is dropped.
    pub fn gather_last(&self, indices: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        unary_shape_op("gather_last", &x)?;
        let c = x.last_dim();
        if indices.len() != x.rows() || indices.iter().any(|&j| j >= c) {
            return Err(TensorError::InvalidArgument {
                op: "gather_last",
                reason: format!("{} indices for shape {:?}", indices.len(), x.shape()),
            });
        }
        let data = indices.iter().enumerate().map(|(r, &j)| x.row(r)[j]).collect();
        let shape = x.shape()[..x.ndim() - 1].to_vec();
        Ok(self.unary(Tensor::new(shape, data)?, Op::Gather(self.id, indices.into())))
    }

    /// Per-row maximum over the last axis, skipping column `excluded[r]`.
    /// The gradient flows to the first maximizing entry.
    pub fn max_last_excluding(&self, excluded: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        unary_shape_op("max_last_excluding", &x)?;
        let c = x.last_dim();
        if excluded.len() != x.rows() || c < 2 {
            return Err(TensorError::InvalidArgument {
                op: "max_last_excluding",
                reason: format!("{} exclusions for shape {:?}", excluded.len(), x.shape()),
            });
        }
        let mut data = Vec::with_capacity(x.rows());
        let mut arg = Vec::with_capacity(x.rows());
        for (r, &skip) in excluded.iter().enumerate() {
            let row = x.row(r);
            let mut best: Option<usize> = None;
            for (j, &v) in row.iter().enumerate() {
                if j != skip && best.is_none_or(|b| v > row[b]) {
                    best = Some(j);
                }
            }
            let b = best.expect("at least two columns");
            arg.push(b);
            data.push(row[b]);
        }
        let shape = x.shape()[..x.ndim() - 1].to_vec();
        Ok(self.unary(Tensor::new(shape, data)?, Op::MaxExcluding(self.id, arg)))
    }
}

/// Diagonal Gaussian log-density summed over the last axis:
/// `Σ_d [-½ ln 2π - ½ log_var_d - (x_d - mean_d)² / (2 exp(log_var_d))]`.
///
/// Variances are floored at [`VARIANCE_FLOOR`]. Returns one value per row.
pub fn gaussian_log_density<'t>(x: Var<'t>, mean: Var<'t>, log_var: Var<'t>) -> Result<Var<'t>> {
    x.check_same_tape(mean)?;
    x.check_same_tape(log_var)?;
    let (vx, vm, vl) = (x.value(), mean.value(), log_var.value());
    for other in [&vm, &vl] {
        if other.shape() != vx.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "gaussian_log_density",
                lhs: vx.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
    }
    unary_shape_op("gaussian_log_density", &vx)?;
    if !vl.all_finite() {
        return Err(TensorError::NonFinite {
            op: "gaussian_log_density",
        });
    }
    let floor = log_variance_floor();
    let c = vx.last_dim();
    let mut data = Vec::with_capacity(vx.rows());
    for r in 0..vx.rows() {
        let mut acc = 0.0;
        for i in r * c..(r + 1) * c {
            let lv = vl.data()[i].max(floor);
            let diff = vx.data()[i] - vm.data()[i];
            acc += -HALF_LN_2PI - 0.5 * lv - diff * diff / (2.0 * lv.exp());
        }
        data.push(acc);
    }
    let shape = vx.shape()[..vx.ndim() - 1].to_vec();
    let rg = x.requires_grad() || mean.requires_grad() || log_var.requires_grad();
    Ok(x.tape.push(
        Tensor::new(shape, data)?,
        Op::GaussianLogDensity(x.id, mean.id, log_var.id),
        rg,
    ))
}

/// Pathwise sample `mean + exp(½ log_var) ⊙ noise` with the noise held fixed.
pub fn reparameterize_with_noise<'t>(
    mean: Var<'t>,
    log_var: Var<'t>,
    noise: &Tensor,
) -> Result<Var<'t>> {
    let ms = mean.shape();
    if ms != log_var.shape() || ms != noise.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "reparameterize",
            lhs: ms,
            rhs: noise.shape().to_vec(),
        });
    }
    let std = log_var.clip(log_variance_floor(), f64::INFINITY).scale(0.5).exp();
    let eps = mean.tape.constant(noise.clone());
    mean.add(std.mul(eps)?)
}

/// Pathwise Gaussian sample with standard-normal noise drawn from `rng`.
pub fn reparameterize<'t>(
    mean: Var<'t>,
    log_var: Var<'t>,
    rng: &mut crate::RngStream,
) -> Result<Var<'t>> {
    let noise = rng.normal_tensor(mean.shape());
    reparameterize_with_noise(mean, log_var, &noise)
}
