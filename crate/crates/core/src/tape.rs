//! A small reverse-mode automatic differentiation tape over dense row-major
//! `f64` matrices.
//!
//! Every value is two dimensional. Binary elementwise operations broadcast
//! along any axis of extent one, which covers bias rows, per-row scalars and
//! plain scalars. A fresh [`Tape`] is built for every forward pass; after
//! [`Tape::backward`] the gradients of every node that depends on a
//! gradient-carrying leaf are available through [`Gradients`].

use std::cell::RefCell;
use std::fmt;

/// Dense row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}x{}, {:?})", self.rows, self.cols, self.data)
    }
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![value] }
    }

    /// Panics when `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length does not match shape {rows}x{cols}");
        Self { rows, cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        let cols = data.len();
        Self { rows: 1, cols, data }
    }

    pub fn column_vector(data: Vec<f64>) -> Self {
        let rows = data.len();
        Self { rows, cols: 1, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { rows: rows.len(), cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a {}x{} tensor", self.rows, self.cols);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch {:?} x {:?}", self.shape(), other.shape());
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor { rows: n, cols: m, data: out }
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Tensor { rows: self.cols, cols: self.rows, data: out }
    }

    /// Sum a broadcast gradient back down to `rows x cols`.
    fn reduce_to(&self, rows: usize, cols: usize) -> Tensor {
        if self.rows == rows && self.cols == cols {
            return self.clone();
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..self.rows {
            let rr = if rows == 1 { 0 } else { r };
            for c in 0..self.cols {
                let cc = if cols == 1 { 0 } else { c };
                out.data[rr * cols + cc] += self.data[r * self.cols + c];
            }
        }
        out
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("cannot broadcast shapes {a:?} and {b:?}")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (rows, cols) = broadcast_shape(a.shape(), b.shape());
    if a.shape() == b.shape() {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Tensor { rows, cols, data };
    }
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let ra = if a.rows == 1 { 0 } else { r };
        let rb = if b.rows == 1 { 0 } else { r };
        for c in 0..cols {
            let ca = if a.cols == 1 { 0 } else { c };
            let cb = if b.cols == 1 { 0 } else { c };
            data.push(f(a.data[ra * a.cols + ca], b.data[rb * b.cols + cb]));
        }
    }
    Tensor { rows, cols, data }
}

/// Numerically stable `log(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x)) = -softplus(-x)`.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    LogSigmoid(usize),
    Square(usize),
    ClampMin(usize, f64),
    MatMul(usize, usize),
    Sum(usize),
    SumCols(usize),
    SumRows(usize),
    LogSumExpCols(usize),
    SliceCols(usize, usize),
    ConcatCols(Vec<usize>),
    GatherRows(usize, Vec<usize>),
    Take(usize, Vec<usize>),
    Reshape(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn unary(&self, a: usize, op: Op, f: impl Fn(&Tensor) -> Tensor) -> Var<'_> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (f(&nodes[a].value), nodes[a].requires_grad)
        };
        self.push(value, op, rg)
    }

    fn binary(&self, a: usize, b: usize, op: Op, f: impl Fn(&Tensor, &Tensor) -> Tensor) -> Var<'_> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (f(&nodes[a].value, &nodes[b].value), nodes[a].requires_grad || nodes[b].requires_grad)
        };
        self.push(value, op, rg)
    }

    /// Concatenate along columns; all parts must have the same row count.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of nothing");
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].id].value.rows;
            let cols: usize = parts.iter().map(|p| nodes[p.id].value.cols).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for p in parts {
                    let t = &nodes[p.id].value;
                    assert_eq!(t.rows, rows, "concat_cols row mismatch");
                    data.extend_from_slice(t.row(r));
                }
            }
            (Tensor { rows, cols, data }, parts.iter().any(|p| nodes[p.id].requires_grad))
        };
        self.push(value, Op::ConcatCols(parts.iter().map(|p| p.id).collect()), rg)
    }

    /// Reverse pass from a scalar (1x1) output.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[output.id].value.shape(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[output.id] = Some(Tensor::scalar(1.0));
        let mut leaf_grads = Vec::new();
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let mut pending: Vec<(usize, Tensor)> = Vec::new();
            let mut acc = |target: usize, contrib: Tensor| {
                if nodes[target].requires_grad {
                    pending.push((target, contrib));
                }
            };
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => {
                    leaf_grads.push((id, g));
                    continue;
                }
                Op::Add(a, b) => {
                    acc(*a, g.reduce_to(val(*a).rows, val(*a).cols));
                    acc(*b, g.reduce_to(val(*b).rows, val(*b).cols));
                }
                Op::Sub(a, b) => {
                    acc(*a, g.reduce_to(val(*a).rows, val(*a).cols));
                    acc(*b, g.map(|x| -x).reduce_to(val(*b).rows, val(*b).cols));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if nodes[*a].requires_grad {
                        acc(*a, broadcast_zip(&g, vb, |x, y| x * y).reduce_to(va.rows, va.cols));
                    }
                    if nodes[*b].requires_grad {
                        acc(*b, broadcast_zip(&g, va, |x, y| x * y).reduce_to(vb.rows, vb.cols));
                    }
                }
                Op::Div(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if nodes[*a].requires_grad {
                        acc(*a, broadcast_zip(&g, vb, |x, y| x / y).reduce_to(va.rows, va.cols));
                    }
                    if nodes[*b].requires_grad {
                        // d(a/b)/db = -out / b
                        let out = &node.value;
                        let t = broadcast_zip(&broadcast_zip(&g, out, |x, o| -x * o), vb, |x, y| x / y);
                        acc(*b, t.reduce_to(vb.rows, vb.cols));
                    }
                }
                Op::Neg(a) => acc(*a, g.map(|x| -x)),
                Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
                Op::Offset(a) => acc(*a, g),
                Op::Exp(a) => acc(*a, broadcast_zip(&g, &node.value, |x, y| x * y)),
                Op::Log(a) => acc(*a, broadcast_zip(&g, val(*a), |x, y| x / y)),
                Op::Tanh(a) => acc(*a, broadcast_zip(&g, &node.value, |x, y| x * (1.0 - y * y))),
                Op::Sigmoid(a) => acc(*a, broadcast_zip(&g, &node.value, |x, y| x * y * (1.0 - y))),
                Op::Softplus(a) => acc(*a, broadcast_zip(&g, val(*a), |x, y| x * sigmoid(y))),
                Op::LogSigmoid(a) => acc(*a, broadcast_zip(&g, val(*a), |x, y| x * sigmoid(-y))),
                Op::Square(a) => acc(*a, broadcast_zip(&g, val(*a), |x, y| 2.0 * x * y)),
                Op::ClampMin(a, lo) => {
                    acc(*a, broadcast_zip(&g, val(*a), |x, y| if y > *lo { x } else { 0.0 }))
                }
                Op::MatMul(a, b) => {
                    if nodes[*a].requires_grad {
                        acc(*a, g.matmul(&val(*b).transpose()));
                    }
                    if nodes[*b].requires_grad {
                        acc(*b, val(*a).transpose().matmul(&g));
                    }
                }
                Op::Sum(a) => {
                    let v = val(*a);
                    acc(*a, Tensor::filled(v.rows, v.cols, g.item()));
                }
                Op::SumCols(a) => {
                    let v = val(*a);
                    let mut t = Tensor::zeros(v.rows, v.cols);
                    for r in 0..v.rows {
                        let gr = g.data[r];
                        t.data[r * v.cols..(r + 1) * v.cols].iter_mut().for_each(|x| *x = gr);
                    }
                    acc(*a, t);
                }
                Op::SumRows(a) => {
                    let v = val(*a);
                    let mut t = Tensor::zeros(v.rows, v.cols);
                    for r in 0..v.rows {
                        t.data[r * v.cols..(r + 1) * v.cols].copy_from_slice(&g.data);
                    }
                    acc(*a, t);
                }
                Op::LogSumExpCols(a) => {
                    let v = val(*a);
                    let mut t = Tensor::zeros(v.rows, v.cols);
                    for r in 0..v.rows {
                        let lse = node.value.data[r];
                        for c in 0..v.cols {
                            let w = if lse == f64::NEG_INFINITY { 0.0 } else { (v.get(r, c) - lse).exp() };
                            t.data[r * v.cols + c] = g.data[r] * w;
                        }
                    }
                    acc(*a, t);
                }
                Op::SliceCols(a, start) => {
                    let v = val(*a);
                    let mut t = Tensor::zeros(v.rows, v.cols);
                    for r in 0..v.rows {
                        for c in 0..g.cols {
                            t.data[r * v.cols + start + c] = g.data[r * g.cols + c];
                        }
                    }
                    acc(*a, t);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let v = val(p);
                        if nodes[p].requires_grad {
                            let mut t = Tensor::zeros(v.rows, v.cols);
                            for r in 0..v.rows {
                                for c in 0..v.cols {
                                    t.data[r * v.cols + c] = g.data[r * g.cols + offset + c];
                                }
                            }
                            acc(p, t);
                        }
                        offset += v.cols;
                    }
                }
                Op::GatherRows(a, idx) => {
                    let v = val(*a);
                    let mut t = Tensor::zeros(v.rows, v.cols);
                    for (r, &src) in idx.iter().enumerate() {
                        for c in 0..v.cols {
                            t.data[src * v.cols + c] += g.data[r * g.cols + c];
                        }
                    }
                    acc(*a, t);
                }
                Op::Take(a, idx) => {
                    let v = val(*a);
                    let mut t = Tensor::zeros(v.rows, v.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            let src = idx[r * g.cols + c];
                            t.data[r * v.cols + src] += g.data[r * g.cols + c];
                        }
                    }
                    acc(*a, t);
                }
                Op::Reshape(a) => {
                    let v = val(*a);
                    acc(*a, Tensor { rows: v.rows, cols: v.cols, data: g.data });
                }
            }
            for (target, contrib) in pending {
                match &mut grads[target] {
                    Some(existing) => existing.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        for (id, g) in leaf_grads {
            grads[id] = Some(g);
        }
        Gradients { grads }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the output with respect to `var`, or `None` when the
    /// output does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but zero-filled when absent.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = var.shape();
                Tensor::zeros(r, c)
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn item(&self) -> f64 {
        self.with_value(Tensor::item)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.with_value(Tensor::shape)
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    pub fn add(self, o: Var<'t>) -> Var<'t> {
        self.tape.binary(self.id, o.id, Op::Add(self.id, o.id), |a, b| broadcast_zip(a, b, |x, y| x + y))
    }

    pub fn sub(self, o: Var<'t>) -> Var<'t> {
        self.tape.binary(self.id, o.id, Op::Sub(self.id, o.id), |a, b| broadcast_zip(a, b, |x, y| x - y))
    }

    pub fn mul(self, o: Var<'t>) -> Var<'t> {
        self.tape.binary(self.id, o.id, Op::Mul(self.id, o.id), |a, b| broadcast_zip(a, b, |x, y| x * y))
    }

    pub fn div(self, o: Var<'t>) -> Var<'t> {
        self.tape.binary(self.id, o.id, Op::Div(self.id, o.id), |a, b| broadcast_zip(a, b, |x, y| x / y))
    }

    pub fn neg(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Neg(self.id), |a| a.map(|x| -x))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::Scale(self.id, s), |a| a.map(|x| x * s))
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::Offset(self.id), |a| a.map(|x| x + s))
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Exp(self.id), |a| a.map(f64::exp))
    }

    pub fn ln(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Log(self.id), |a| a.map(f64::ln))
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Tanh(self.id), |a| a.map(f64::tanh))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Sigmoid(self.id), |a| a.map(sigmoid))
    }

    pub fn softplus(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Softplus(self.id), |a| a.map(softplus))
    }

    pub fn log_sigmoid(self) -> Var<'t> {
        self.tape.unary(self.id, Op::LogSigmoid(self.id), |a| a.map(log_sigmoid))
    }

    pub fn square(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Square(self.id), |a| a.map(|x| x * x))
    }

    /// `max(x, lo)` elementwise; the gradient is zero where the floor is active.
    pub fn clamp_min(self, lo: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::ClampMin(self.id, lo), |a| a.map(|x| x.max(lo)))
    }

    pub fn matmul(self, o: Var<'t>) -> Var<'t> {
        self.tape.binary(self.id, o.id, Op::MatMul(self.id, o.id), |a, b| a.matmul(b))
    }

    /// Sum of all entries, 1x1.
    pub fn sum(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Sum(self.id), |a| Tensor::scalar(a.data.iter().sum()))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.with_value(Tensor::len) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum within each row, `rows x 1`.
    pub fn sum_cols(self) -> Var<'t> {
        self.tape.unary(self.id, Op::SumCols(self.id), |a| {
            Tensor::column_vector((0..a.rows).map(|r| a.row(r).iter().sum()).collect())
        })
    }

    /// Sum within each column, `1 x cols`.
    pub fn sum_rows(self) -> Var<'t> {
        self.tape.unary(self.id, Op::SumRows(self.id), |a| {
            let mut out = vec![0.0; a.cols];
            for r in 0..a.rows {
                for (o, x) in out.iter_mut().zip(a.row(r)) {
                    *o += x;
                }
            }
            Tensor::row_vector(out)
        })
    }

    /// Row-wise log-sum-exp, `rows x 1`.
    pub fn logsumexp_cols(self) -> Var<'t> {
        self.tape.unary(self.id, Op::LogSumExpCols(self.id), |a| {
            Tensor::column_vector((0..a.rows).map(|r| logsumexp(a.row(r))).collect())
        })
    }

    /// Row-wise log-softmax.
    pub fn log_softmax_cols(self) -> Var<'t> {
        self.sub(self.logsumexp_cols())
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t> {
        self.tape.unary(self.id, Op::SliceCols(self.id, start), |a| {
            assert!(start <= end && end <= a.cols, "slice {start}..{end} out of {} cols", a.cols);
            let cols = end - start;
            let mut data = Vec::with_capacity(a.rows * cols);
            for r in 0..a.rows {
                data.extend_from_slice(&a.row(r)[start..end]);
            }
            Tensor { rows: a.rows, cols, data }
        })
    }

    /// Select rows by index, with repetition allowed.
    pub fn gather_rows(self, idx: &[usize]) -> Var<'t> {
        let idx = idx.to_vec();
        let value = self.with_value(|a| {
            let mut data = Vec::with_capacity(idx.len() * a.cols);
            for &i in &idx {
                data.extend_from_slice(a.row(i));
            }
            Tensor { rows: idx.len(), cols: a.cols, data }
        });
        let rg = self.tape.nodes.borrow()[self.id].requires_grad;
        self.tape.push(value, Op::GatherRows(self.id, idx), rg)
    }

    /// Per-row column gather: `out[r][c] = self[r][idx[r * out_cols + c]]`.
    pub fn take(self, out_cols: usize, idx: &[usize]) -> Var<'t> {
        let idx = idx.to_vec();
        let value = self.with_value(|a| {
            assert_eq!(idx.len(), a.rows * out_cols, "take index length");
            let mut data = Vec::with_capacity(idx.len());
            for r in 0..a.rows {
                for c in 0..out_cols {
                    data.push(a.get(r, idx[r * out_cols + c]));
                }
            }
            Tensor { rows: a.rows, cols: out_cols, data }
        });
        let rg = self.tape.nodes.borrow()[self.id].requires_grad;
        self.tape.push(value, Op::Take(self.id, idx), rg)
    }

    /// Reinterpret the row-major data with a new shape.
    pub fn reshape(self, rows: usize, cols: usize) -> Var<'t> {
        self.tape.unary(self.id, Op::Reshape(self.id), |a| {
            assert_eq!(a.len(), rows * cols, "reshape size mismatch");
            Tensor { rows, cols, data: a.data.clone() }
        })
    }
}

/// Stable log-sum-exp of a slice; `-inf` for an empty or all `-inf` slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if m == f64::INFINITY {
        return f64::INFINITY;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

macro_rules! impl_binop {
    ($trait:ident, $method:ident, $call:ident) => {
        impl<'t> std::ops::$trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                Var::$call(self, rhs)
            }
        }
    };
}
impl_binop!(Add, add, add);
impl_binop!(Sub, sub, sub);
impl_binop!(Mul, mul, mul);
impl_binop!(Div, div, div);

impl<'t> std::ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        Var::neg(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(build: impl for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>, x0: Tensor) {
        let tape = Tape::new();
        let x = tape.param(x0.clone());
        let y = build(&tape, x);
        let grads = tape.backward(y);
        let g = grads.get_or_zeros(x);
        let eps = 1e-6;
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x0.clone();
            xm.data_mut()[i] -= eps;
            let tp = Tape::new();
            let fp = build(&tp, tp.constant(xp)).item();
            let tm = Tape::new();
            let fm = build(&tm, tm.constant(xm)).item();
            let fd = (fp - fm) / (2.0 * eps);
            let an = g.data()[i];
            assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "coord {i}: fd {fd} vs analytic {an}");
        }
    }

    fn sample() -> Tensor {
        Tensor::from_vec(2, 3, vec![0.3, -1.2, 0.7, 1.5, -0.4, 0.1])
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        fd_check(|_, x| x.exp().sum(), sample());
        fd_check(|_, x| x.tanh().square().sum(), sample());
        fd_check(|_, x| x.sigmoid().ln().sum(), sample());
        fd_check(|_, x| x.softplus().mul(x).sum(), sample());
        fd_check(|_, x| x.log_sigmoid().scale(3.0).sum(), sample());
        fd_check(|_, x| x.square().add_scalar(1.0).ln().neg().sum(), sample());
        fd_check(|t, x| x.div(t.constant(sample().map(|v| v + 3.0))).sum(), sample());
        fd_check(|t, x| t.constant(sample()).div(x.square().add_scalar(1.0)).sum(), sample());
    }

    #[test]
    fn broadcast_and_reduction_gradients_match_finite_differences() {
        let bias = Tensor::row_vector(vec![0.5, -0.5, 2.0]);
        fd_check(move |t, b| t.constant(sample()).add(b).tanh().sum(), bias.clone());
        fd_check(|t, x| x.sum_cols().mul(t.constant(Tensor::column_vector(vec![1.0, -2.0]))).sum(), sample());
        fd_check(|_, x| x.sum_rows().square().sum(), sample());
        fd_check(|_, x| x.logsumexp_cols().sum(), sample());
        fd_check(|_, x| x.log_softmax_cols().take(1, &[2, 0]).sum(), sample());
        fd_check(|t, x| x.mul(t.constant(Tensor::column_vector(vec![2.0, 3.0]))).exp().sum(), sample());
        fd_check(|t, s| t.constant(sample()).mul(s).sum(), Tensor::scalar(0.7));
    }

    #[test]
    fn structural_op_gradients_match_finite_differences() {
        let w = Tensor::from_vec(3, 2, vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6]);
        fd_check(move |t, x| x.matmul(t.constant(w.clone())).tanh().sum(), sample());
        let a = sample();
        fd_check(move |t, w| t.constant(a.clone()).matmul(w).square().sum(), Tensor::from_vec(3, 1, vec![1.0, 2.0, 3.0]));
        fd_check(|_, x| x.slice_cols(1, 3).exp().sum(), sample());
        fd_check(|t, x| t.concat_cols(&[x.exp(), x, x.slice_cols(0, 1)]).square().sum(), sample());
        fd_check(|_, x| x.gather_rows(&[1, 1, 0]).exp().sum(), sample());
        fd_check(|_, x| x.reshape(3, 2).logsumexp_cols().sum(), sample());
        fd_check(|_, x| x.take(2, &[2, 2, 0, 1]).exp().sum(), sample());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(sample());
        let p = tape.param(sample());
        let y = c.mul(p).sum();
        let g = tape.backward(y);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap(), &sample());
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::new();
        let p = tape.param(Tensor::scalar(2.0));
        let y = p.mul(p.detach()).sum();
        let g = tape.backward(y);
        assert_eq!(g.get(p).unwrap().item(), 2.0);
    }

    #[test]
    fn logsumexp_is_stable() {
        assert_eq!(logsumexp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
        let v = logsumexp(&[1000.0, 1000.0]);
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }
}
