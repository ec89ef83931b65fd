//! Operation recording and reverse-mode differentiation.
//!
//! A [`Tape`] appends one node per executed op; node ids are therefore a
//! topological order and `backward` walks them once, in reverse. An op
//! whose inputs are all untracked (constants, or anything on an inference
//! tape) is evaluated but not recorded, so inference keeps no
//! intermediates alive beyond the [`Var`]s the caller holds.
//!
//! Shape errors are contract violations and panic with both shapes.

use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Environment toggle: scan every op output for NaN/Inf.
pub const CHECK_FINITE_ENV: &str = "MESHDEFORM_CHECK_FINITE";

#[derive(Clone)]
struct In {
    id: Option<usize>,
    value: Rc<Tensor>,
}

enum Op {
    Leaf,
    MatMul(In, In),
    Add(In, In),
    Sub(In, In),
    Mul(In, In),
    Scale(In, f64),
    AddScalar(In),
    BroadcastRows(In),
    BroadcastCols(In),
    ConcatCols(Vec<In>),
    ConcatRows(Vec<In>),
    SliceCols(In, usize),
    GatherRows(In, Rc<[usize]>),
    ScatterAddRows(In, Rc<[usize]>),
    Softmax(In),
    Relu(In),
    Silu(In),
    Sqrt(In),
    Recip(In),
    Abs(In),
    Sum(In),
    MeanRows(In),
    MeanCols(In),
    SumCols(In),
    RowNorm(In),
    Transpose(In),
    Reshape(In),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::BroadcastCols(..) => "broadcast_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterAddRows(..) => "scatter_add_rows",
            Op::Softmax(..) => "softmax_lastdim",
            Op::Relu(..) => "relu",
            Op::Silu(..) => "silu",
            Op::Sqrt(..) => "sqrt",
            Op::Recip(..) => "recip",
            Op::Abs(..) => "abs",
            Op::Sum(..) => "sum",
            Op::MeanRows(..) => "mean_rows",
            Op::MeanCols(..) => "mean_cols",
            Op::SumCols(..) => "sum_cols",
            Op::RowNorm(..) => "row_norm",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
        }
    }

    fn inputs(&self) -> Vec<&In> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.iter().collect(),
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::BroadcastRows(a)
            | Op::BroadcastCols(a)
            | Op::SliceCols(a, _)
            | Op::GatherRows(a, _)
            | Op::ScatterAddRows(a, _)
            | Op::Softmax(a)
            | Op::Relu(a)
            | Op::Silu(a)
            | Op::Sqrt(a)
            | Op::Recip(a)
            | Op::Abs(a)
            | Op::Sum(a)
            | Op::MeanRows(a)
            | Op::MeanCols(a)
            | Op::SumCols(a)
            | Op::RowNorm(a)
            | Op::Transpose(a)
            | Op::Reshape(a) => vec![a],
        }
    }
}

struct Node {
    op: Op,
    value: Rc<Tensor>,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    record: bool,
    check_finite: bool,
    nonfinite: RefCell<Option<String>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn env_check_finite() -> bool {
    std::env::var(CHECK_FINITE_ENV).is_ok_and(|v| !v.is_empty() && v != "0")
}

impl Tape {
    /// A recording tape.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            record: true,
            check_finite: env_check_finite(),
            nonfinite: RefCell::new(None),
        }
    }

    /// A tape that evaluates without recording anything.
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input (parameter). Untracked on an inference tape.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        let value = Rc::new(t);
        if !self.record {
            return Var {
                tape: self,
                id: None,
                value,
            };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: Op::Leaf,
            value: value.clone(),
        });
        Var {
            tape: self,
            id: Some(nodes.len() - 1),
            value,
        }
    }

    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.constant_rc(Rc::new(t))
    }

    pub fn constant_rc(&self, value: Rc<Tensor>) -> Var<'_> {
        Var {
            tape: self,
            id: None,
            value,
        }
    }

    /// First op that produced a non-finite value while finite checks were on.
    pub fn check_finite(&self) -> Result<()> {
        match self.nonfinite.borrow().as_ref() {
            Some(op) => Err(Error::NonFinite { op: op.clone() }),
            None => Ok(()),
        }
    }

    fn push(&self, op: Op, value: Tensor) -> Var<'_> {
        if self.check_finite && !value.all_finite() {
            self.nonfinite
                .borrow_mut()
                .get_or_insert_with(|| op.name().to_string());
        }
        let value = Rc::new(value);
        let tracked = self.record && op.inputs().iter().any(|i| i.id.is_some());
        if !tracked {
            return Var {
                tape: self,
                id: None,
                value,
            };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value: value.clone(),
        });
        Var {
            tape: self,
            id: Some(nodes.len() - 1),
            value,
        }
    }

    /// Reverse pass from a scalar. Every recorded node gets a gradient
    /// slot; nodes the loss does not depend on read back as zeros.
    pub fn backward(&self, loss: &Var<'_>) -> Result<Gradients> {
        if loss.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.value.shape()
            )));
        }
        self.check_finite()?;
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        let Some(root) = loss.id else {
            return Ok(Gradients { grads });
        };
        grads[root] = Some(Tensor::full(loss.value.shape(), 1.0));
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            for (input, dg) in backward_op(&node.op, &node.value, &g) {
                if let Some(slot) = input {
                    match &mut grads[slot] {
                        Some(acc) => acc.add_assign(&dg),
                        empty => *empty = Some(dg),
                    }
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a leaf; zeros if unreached.
    pub fn get(&self, var: &Var<'_>) -> Tensor {
        var.id
            .and_then(|id| self.grads.get(id).cloned().flatten())
            .unwrap_or_else(|| Tensor::zeros(var.value.shape()))
    }
}

/// A value on a tape.
#[derive(Clone)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: Option<usize>,
    value: Rc<Tensor>,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({:?}, {:?})", self.id, self.value)
    }
}

fn shape_panic(op: &str, a: &[usize], b: &[usize]) -> ! {
    panic!("contract violation: {op} shape mismatch {a:?} vs {b:?}")
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()).expect("same len")
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("same len")
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn rows(&self) -> usize {
        self.value.rows()
    }

    pub fn cols(&self) -> usize {
        self.value.cols()
    }

    pub fn item(&self) -> f64 {
        self.value.item()
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    /// Same value, cut off from the gradient.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant_rc(self.value.clone())
    }

    fn input(&self) -> In {
        In {
            id: self.id,
            value: self.value.clone(),
        }
    }

    fn check_same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "contract violation: vars from different tapes"
        );
    }

    pub fn matmul(&self, other: &Var<'t>) -> Var<'t> {
        self.check_same_tape(other);
        let (a, b) = (&*self.value, &*other.value);
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            shape_panic("matmul", a.shape(), b.shape());
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let out = Tensor::matrix(m, n, gemm(a.data(), false, b.data(), false, m, k, n)).expect("gemm");
        self.tape.push(Op::MatMul(self.input(), other.input()), out)
    }

    fn elementwise<'a>(&'a self, other: &'a Var<'t>, name: &str) -> (&'a Tensor, &'a Tensor) {
        self.check_same_tape(other);
        if self.shape() != other.shape() {
            shape_panic(name, self.shape(), other.shape());
        }
        (&self.value, &other.value)
    }

    pub fn add(&self, other: &Var<'t>) -> Var<'t> {
        let (a, b) = self.elementwise(other, "add");
        let out = zip(a, b, |x, y| x + y);
        self.tape.push(Op::Add(self.input(), other.input()), out)
    }

    pub fn sub(&self, other: &Var<'t>) -> Var<'t> {
        let (a, b) = self.elementwise(other, "sub");
        let out = zip(a, b, |x, y| x - y);
        self.tape.push(Op::Sub(self.input(), other.input()), out)
    }

    pub fn mul(&self, other: &Var<'t>) -> Var<'t> {
        let (a, b) = self.elementwise(other, "mul");
        let out = zip(a, b, |x, y| x * y);
        self.tape.push(Op::Mul(self.input(), other.input()), out)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let out = map(&self.value, |x| x * c);
        self.tape.push(Op::Scale(self.input(), c), out)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let out = map(&self.value, |x| x + c);
        self.tape.push(Op::AddScalar(self.input()), out)
    }

    /// Repeats a row vector (`[n]` or `[1, n]`) into `[m, n]`.
    pub fn broadcast_rows(&self, m: usize) -> Var<'t> {
        let s = self.shape();
        let ok = s.len() == 1 || (s.len() == 2 && s[0] == 1);
        if !ok {
            shape_panic("broadcast_rows", s, &[m]);
        }
        let n = self.value.len();
        let mut data = Vec::with_capacity(m * n);
        for _ in 0..m {
            data.extend_from_slice(self.value.data());
        }
        let out = Tensor::matrix(m, n, data).expect("len");
        self.tape.push(Op::BroadcastRows(self.input()), out)
    }

    /// Repeats a column vector `[m, 1]` into `[m, n]`.
    pub fn broadcast_cols(&self, n: usize) -> Var<'t> {
        let s = self.shape();
        if s.len() != 2 || s[1] != 1 {
            shape_panic("broadcast_cols", s, &[n]);
        }
        let m = s[0];
        let mut data = Vec::with_capacity(m * n);
        for &x in self.value.data() {
            data.extend(std::iter::repeat_n(x, n));
        }
        let out = Tensor::matrix(m, n, data).expect("len");
        self.tape.push(Op::BroadcastCols(self.input()), out)
    }

    /// Adds a bias row to every row.
    pub fn add_row(&self, bias: &Var<'t>) -> Var<'t> {
        self.add(&bias.broadcast_rows(self.rows()))
    }

    /// Multiplies every row `i` by `col[i]`.
    pub fn mul_col(&self, col: &Var<'t>) -> Var<'t> {
        self.mul(&col.broadcast_cols(self.cols()))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "contract violation: concat of nothing");
        let tape = parts[0].tape;
        let m = parts[0].rows();
        for p in parts {
            parts[0].check_same_tape(p);
            if p.shape().len() != 2 || p.rows() != m {
                shape_panic("concat_cols", parts[0].shape(), p.shape());
            }
        }
        let n: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for p in parts {
                data.extend_from_slice(p.value.row(i));
            }
        }
        let out = Tensor::matrix(m, n, data).expect("len");
        tape.push(Op::ConcatCols(parts.iter().map(Var::input).collect()), out)
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "contract violation: concat of nothing");
        let tape = parts[0].tape;
        let n = parts[0].cols();
        for p in parts {
            parts[0].check_same_tape(p);
            if p.shape().len() != 2 || p.cols() != n {
                shape_panic("concat_rows", parts[0].shape(), p.shape());
            }
        }
        let m: usize = parts.iter().map(|p| p.rows()).sum();
        let mut data = Vec::with_capacity(m * n);
        for p in parts {
            data.extend_from_slice(p.value.data());
        }
        let out = Tensor::matrix(m, n, data).expect("len");
        tape.push(Op::ConcatRows(parts.iter().map(Var::input).collect()), out)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Var<'t> {
        if self.shape().len() != 2 || start > end || end > self.cols() {
            shape_panic("slice_cols", self.shape(), &[start, end]);
        }
        let (m, n) = (self.rows(), self.cols());
        let mut data = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            data.extend_from_slice(&self.value.data()[i * n + start..i * n + end]);
        }
        let out = Tensor::matrix(m, end - start, data).expect("len");
        self.tape.push(Op::SliceCols(self.input(), start), out)
    }

    /// Output row `r` is input row `idx[r]`.
    pub fn gather_rows(&self, idx: impl Into<Rc<[usize]>>) -> Var<'t> {
        let idx: Rc<[usize]> = idx.into();
        if self.shape().len() != 2 {
            shape_panic("gather_rows", self.shape(), &[idx.len()]);
        }
        let (m, n) = (self.rows(), self.cols());
        let mut data = Vec::with_capacity(idx.len() * n);
        for &r in idx.iter() {
            assert!(r < m, "contract violation: gather_rows index {r} out of {m} rows");
            data.extend_from_slice(self.value.row(r));
        }
        let out = Tensor::matrix(idx.len(), n, data).expect("len");
        self.tape.push(Op::GatherRows(self.input(), idx), out)
    }

    /// Output row `idx[r]` accumulates input row `r`; `rows` output rows.
    pub fn scatter_add_rows(&self, idx: impl Into<Rc<[usize]>>, rows: usize) -> Var<'t> {
        let idx: Rc<[usize]> = idx.into();
        if self.shape().len() != 2 || idx.len() != self.rows() {
            shape_panic("scatter_add_rows", self.shape(), &[idx.len()]);
        }
        let n = self.cols();
        let mut data = vec![0.0; rows * n];
        for (r, &t) in idx.iter().enumerate() {
            assert!(t < rows, "contract violation: scatter index {t} out of {rows} rows");
            let src = self.value.row(r);
            for (d, s) in data[t * n..(t + 1) * n].iter_mut().zip(src) {
                *d += s;
            }
        }
        let out = Tensor::matrix(rows, n, data).expect("len");
        self.tape.push(Op::ScatterAddRows(self.input(), idx), out)
    }

    /// Softmax over the last axis, max-shifted.
    pub fn softmax_lastdim(&self) -> Var<'t> {
        let n = self.cols();
        let mut data = self.value.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let out = Tensor::new(self.shape().to_vec(), data).expect("len");
        self.tape.push(Op::Softmax(self.input()), out)
    }

    pub fn relu(&self) -> Var<'t> {
        let out = map(&self.value, |x| x.max(0.0));
        self.tape.push(Op::Relu(self.input()), out)
    }

    pub fn silu(&self) -> Var<'t> {
        let out = map(&self.value, |x| x * sigmoid(x));
        self.tape.push(Op::Silu(self.input()), out)
    }

    pub fn sqrt(&self) -> Var<'t> {
        let out = map(&self.value, f64::sqrt);
        self.tape.push(Op::Sqrt(self.input()), out)
    }

    pub fn recip(&self) -> Var<'t> {
        let out = map(&self.value, f64::recip);
        self.tape.push(Op::Recip(self.input()), out)
    }

    /// Absolute value; subgradient 0 at 0.
    pub fn abs(&self) -> Var<'t> {
        let out = map(&self.value, f64::abs);
        self.tape.push(Op::Abs(self.input()), out)
    }

    pub fn sum(&self) -> Var<'t> {
        let out = Tensor::scalar(self.value.data().iter().sum());
        self.tape.push(Op::Sum(self.input()), out)
    }

    /// Mean over rows: `[m, n] -> [1, n]`.
    pub fn mean_rows(&self) -> Var<'t> {
        let (m, n) = (self.rows(), self.cols());
        let mut data = vec![0.0; n];
        for i in 0..m {
            for (d, x) in data.iter_mut().zip(self.value.row(i)) {
                *d += x;
            }
        }
        let inv = 1.0 / m as f64;
        data.iter_mut().for_each(|d| *d *= inv);
        let out = Tensor::matrix(1, n, data).expect("len");
        self.tape.push(Op::MeanRows(self.input()), out)
    }

    /// Mean over columns: `[m, n] -> [m, 1]`.
    pub fn mean_cols(&self) -> Var<'t> {
        let n = self.cols();
        let inv = 1.0 / n as f64;
        let data = (0..self.rows())
            .map(|i| self.value.row(i).iter().sum::<f64>() * inv)
            .collect();
        let out = Tensor::matrix(self.rows(), 1, data).expect("len");
        self.tape.push(Op::MeanCols(self.input()), out)
    }

    /// Sum over columns: `[m, n] -> [m, 1]`.
    pub fn sum_cols(&self) -> Var<'t> {
        let data = (0..self.rows())
            .map(|i| self.value.row(i).iter().sum::<f64>())
            .collect();
        let out = Tensor::matrix(self.rows(), 1, data).expect("len");
        self.tape.push(Op::SumCols(self.input()), out)
    }

    /// Euclidean norm of each row, `[m, n] -> [m, 1]`. The gradient at a
    /// zero row is taken as zero.
    pub fn row_norm(&self) -> Var<'t> {
        let data = (0..self.rows())
            .map(|i| self.value.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let out = Tensor::matrix(self.rows(), 1, data).expect("len");
        self.tape.push(Op::RowNorm(self.input()), out)
    }

    /// Swaps the last two axes (batched for rank 3).
    pub fn transpose(&self) -> Var<'t> {
        let s = self.shape();
        if !(s.len() == 2 || s.len() == 3) {
            shape_panic("transpose", s, &[]);
        }
        let out = transpose_last2(&self.value);
        self.tape.push(Op::Transpose(self.input()), out)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t> {
        let out = match (*self.value).clone().reshaped(shape.to_vec()) {
            Ok(t) => t,
            Err(_) => shape_panic("reshape", self.shape(), shape),
        };
        self.tape.push(Op::Reshape(self.input()), out)
    }
}

fn transpose_last2(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (batch, m, n) = if s.len() == 3 {
        (s[0], s[1], s[2])
    } else {
        (1, s[0], s[1])
    };
    let mut data = vec![0.0; t.len()];
    let src = t.data();
    for b in 0..batch {
        let off = b * m * n;
        for i in 0..m {
            for j in 0..n {
                data[off + j * m + i] = src[off + i * n + j];
            }
        }
    }
    let mut shape = s.to_vec();
    let r = shape.len();
    shape.swap(r - 2, r - 1);
    Tensor::new(shape, data).expect("len")
}

fn with_shape(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).expect("len")
}

/// Input gradients of one node given its output gradient.
fn backward_op(op: &Op, out: &Tensor, g: &Tensor) -> Vec<(Option<usize>, Tensor)> {
    let gd = g.data();
    match op {
        Op::Leaf => Vec::new(),
        Op::MatMul(a, b) => {
            let (m, k) = (a.value.shape()[0], a.value.shape()[1]);
            let n = b.value.shape()[1];
            let mut v = Vec::new();
            if a.id.is_some() {
                let da = gemm(gd, false, b.value.data(), true, m, n, k);
                v.push((a.id, with_shape(&[m, k], da)));
            }
            if b.id.is_some() {
                let db = gemm(a.value.data(), true, gd, false, k, m, n);
                v.push((b.id, with_shape(&[k, n], db)));
            }
            v
        }
        Op::Add(a, b) => tracked(&[
            (a, &|| g.clone()),
            (b, &|| g.clone()),
        ]),
        Op::Sub(a, b) => tracked(&[(a, &|| g.clone()), (b, &|| map(g, |x| -x))]),
        Op::Mul(a, b) => tracked(&[
            (a, &|| zip(g, &b.value, |x, y| x * y)),
            (b, &|| zip(g, &a.value, |x, y| x * y)),
        ]),
        Op::Scale(a, c) => vec![(a.id, map(g, |x| x * c))],
        Op::AddScalar(a) => vec![(a.id, g.clone())],
        Op::BroadcastRows(a) => {
            let n = a.value.len();
            let mut d = vec![0.0; n];
            for row in gd.chunks_exact(n) {
                for (x, y) in d.iter_mut().zip(row) {
                    *x += y;
                }
            }
            vec![(a.id, with_shape(a.value.shape(), d))]
        }
        Op::BroadcastCols(a) => {
            let n = g.cols();
            let d = gd.chunks_exact(n).map(|r| r.iter().sum()).collect();
            vec![(a.id, with_shape(a.value.shape(), d))]
        }
        Op::ConcatCols(parts) => {
            let (m, n) = (g.rows(), g.cols());
            let mut off = 0;
            let mut v = Vec::new();
            for p in parts {
                let w = p.value.cols();
                if p.id.is_some() {
                    let mut d = Vec::with_capacity(m * w);
                    for i in 0..m {
                        d.extend_from_slice(&gd[i * n + off..i * n + off + w]);
                    }
                    v.push((p.id, with_shape(p.value.shape(), d)));
                }
                off += w;
            }
            v
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            let mut v = Vec::new();
            for p in parts {
                let len = p.value.len();
                if p.id.is_some() {
                    v.push((p.id, with_shape(p.value.shape(), gd[off..off + len].to_vec())));
                }
                off += len;
            }
            v
        }
        Op::SliceCols(a, start) => {
            let (m, n) = (a.value.rows(), a.value.cols());
            let w = g.cols();
            let mut d = vec![0.0; m * n];
            for i in 0..m {
                d[i * n + start..i * n + start + w].copy_from_slice(&gd[i * w..(i + 1) * w]);
            }
            vec![(a.id, with_shape(a.value.shape(), d))]
        }
        Op::GatherRows(a, idx) => {
            let n = a.value.cols();
            let mut d = vec![0.0; a.value.len()];
            for (r, &src) in idx.iter().enumerate() {
                for (x, y) in d[src * n..(src + 1) * n].iter_mut().zip(&gd[r * n..(r + 1) * n]) {
                    *x += y;
                }
            }
            vec![(a.id, with_shape(a.value.shape(), d))]
        }
        Op::ScatterAddRows(a, idx) => {
            let n = a.value.cols();
            let mut d = Vec::with_capacity(a.value.len());
            for &t in idx.iter() {
                d.extend_from_slice(&gd[t * n..(t + 1) * n]);
            }
            vec![(a.id, with_shape(a.value.shape(), d))]
        }
        Op::Softmax(a) => {
            // dx = y * (dy - <dy, y>) per row
            let n = out.cols().max(1);
            let mut d = Vec::with_capacity(out.len());
            for (y, dy) in out.data().chunks(n).zip(gd.chunks(n)) {
                let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                d.extend(y.iter().zip(dy).map(|(yi, gi)| yi * (gi - dot)));
            }
            vec![(a.id, with_shape(a.value.shape(), d))]
        }
        Op::Relu(a) => vec![(a.id, zip(g, &a.value, |gi, x| if x > 0.0 { gi } else { 0.0 }))],
        Op::Silu(a) => vec![(
            a.id,
            zip(g, &a.value, |gi, x| {
                let s = sigmoid(x);
                gi * s * (1.0 + x * (1.0 - s))
            }),
        )],
        Op::Sqrt(a) => vec![(a.id, zip(g, out, |gi, y| gi * 0.5 / y))],
        Op::Recip(a) => vec![(a.id, zip(g, out, |gi, y| -gi * y * y))],
        Op::Abs(a) => vec![(a.id, zip(g, &a.value, |gi, x| gi * sign(x)))],
        Op::Sum(a) => vec![(a.id, Tensor::full(a.value.shape(), gd[0]))],
        Op::MeanRows(a) => {
            let m = a.value.rows();
            let inv = 1.0 / m as f64;
            let row: Vec<f64> = gd.iter().map(|x| x * inv).collect();
            let mut d = Vec::with_capacity(a.value.len());
            for _ in 0..m {
                d.extend_from_slice(&row);
            }
            vec![(a.id, with_shape(a.value.shape(), d))]
        }
        Op::MeanCols(a) | Op::SumCols(a) => {
            let n = a.value.cols();
            let s = if matches!(op, Op::MeanCols(_)) { 1.0 / n as f64 } else { 1.0 };
            let mut d = Vec::with_capacity(a.value.len());
            for &gi in gd {
                d.extend(std::iter::repeat_n(gi * s, n));
            }
            vec![(a.id, with_shape(a.value.shape(), d))]
        }
        Op::RowNorm(a) => {
            let n = a.value.cols();
            let mut d = Vec::with_capacity(a.value.len());
            for (i, row) in a.value.data().chunks_exact(n.max(1)).enumerate() {
                let norm = out.data()[i];
                let s = if norm > 0.0 { gd[i] / norm } else { 0.0 };
                d.extend(row.iter().map(|x| x * s));
            }
            vec![(a.id, with_shape(a.value.shape(), d))]
        }
        Op::Transpose(a) => vec![(a.id, transpose_last2(g))],
        Op::Reshape(a) => vec![(a.id, with_shape(a.value.shape(), gd.to_vec()))],
    }
}

/// Evaluates only the gradients of tracked inputs.
fn tracked(parts: &[(&In, &dyn Fn() -> Tensor)]) -> Vec<(Option<usize>, Tensor)> {
    parts
        .iter()
        .filter(|(input, _)| input.id.is_some())
        .map(|(input, grad)| (input.id, grad()))
        .collect()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
