//! Reverse-mode automatic differentiation on dense matrices.
//!
//! A [`Tape`] is an append-only arena of nodes; every operation records its
//! parents and caches its value, and [`Var::backward`] walks the arena in
//! reverse, accumulating gradients. Values are `(rows, cols)` matrices with
//! rows as the batch dimension; scalars are 1x1. Shape mismatches are
//! programmer errors and panic, mirroring the underlying matrix library.

use std::cell::RefCell;

use ndarray::{s, Array2, Axis};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// Broadcast a 1xD row across the batch.
    AddRow(usize, usize),
    MulRow(usize, usize),
    /// Broadcast an Nx1 column across features.
    SubCol(usize, usize),
    DivCol(usize, usize),
    Elu(usize),
    Tanh(usize),
    Softplus(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Square(usize),
    Scale(usize, f64),
    AddScalar(usize),
    SumRows(usize),
    SumAll(usize),
    MeanAll(usize),
    SliceCols(usize, usize, usize),
    ConcatCols(usize, usize),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Array2<f64>,
}

/// Gradient arena produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zero if the loss never
    /// touched it.
    pub fn wrt(&self, v: Var<'_>) -> Array2<f64> {
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => Array2::zeros(self.shapes[v.id]),
        }
    }
}

/// Arena of recorded operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to one tape node.
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

fn softplus_scalar(x: f64) -> f64 {
    // Stable at both tails: max(x, 0) + ln(1 + exp(-|x|)).
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    /// Records an input node. Leaves are the only nodes callers read
    /// gradients from; everything is differentiable through.
    pub fn leaf(&self, value: Array2<f64>) -> Var<'_> {
        self.push(Op::Leaf, value)
    }

    fn push(&self, op: Op, value: Array2<f64>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value_of(&self, id: usize) -> Array2<f64> {
        self.nodes.borrow()[id].value.clone()
    }
}

macro_rules! same_shape {
    ($a:expr, $b:expr, $what:expr) => {
        assert_eq!($a.dim(), $b.dim(), "shape mismatch in {}", $what);
    };
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Array2<f64> {
        self.tape.value_of(self.id)
    }

    pub fn dim(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.dim()
    }

    fn unary(self, op: fn(usize) -> Op, f: impl Fn(&Array2<f64>) -> Array2<f64>) -> Var<'t> {
        let v = self.value();
        self.tape.push(op(self.id), f(&v))
    }

    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        assert_eq!(a.ncols(), b.nrows(), "inner dimensions differ in matmul");
        self.tape.push(Op::MatMul(self.id, rhs.id), a.dot(&b))
    }

    pub fn add(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        same_shape!(a, b, "add");
        self.tape.push(Op::Add(self.id, rhs.id), a + b)
    }

    pub fn sub(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        same_shape!(a, b, "sub");
        self.tape.push(Op::Sub(self.id, rhs.id), a - b)
    }

    pub fn mul(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        same_shape!(a, b, "mul");
        self.tape.push(Op::Mul(self.id, rhs.id), a * b)
    }

    pub fn div(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        same_shape!(a, b, "div");
        self.tape.push(Op::Div(self.id, rhs.id), a / b)
    }

    /// `self + row` with `row` of shape 1xD broadcast over the batch.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        let (a, r) = (self.value(), row.value());
        assert_eq!((1, a.ncols()), r.dim(), "bias row shape mismatch");
        self.tape.push(Op::AddRow(self.id, row.id), a + &r.row(0))
    }

    pub fn mul_row(self, row: Var<'t>) -> Var<'t> {
        let (a, r) = (self.value(), row.value());
        assert_eq!((1, a.ncols()), r.dim(), "scale row shape mismatch");
        self.tape.push(Op::MulRow(self.id, row.id), a * &r.row(0))
    }

    /// `self - col` with `col` of shape Nx1 broadcast across features.
    pub fn sub_col(self, col: Var<'t>) -> Var<'t> {
        let (a, c) = (self.value(), col.value());
        assert_eq!((a.nrows(), 1), c.dim(), "column shape mismatch");
        self.tape.push(Op::SubCol(self.id, col.id), a - &c)
    }

    pub fn div_col(self, col: Var<'t>) -> Var<'t> {
        let (a, c) = (self.value(), col.value());
        assert_eq!((a.nrows(), 1), c.dim(), "column shape mismatch");
        self.tape.push(Op::DivCol(self.id, col.id), a / &c)
    }

    pub fn elu(self) -> Var<'t> {
        self.unary(Op::Elu, |v| v.mapv(|x| if x > 0.0 { x } else { x.exp() - 1.0 }))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh, |v| v.mapv(f64::tanh))
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(Op::Softplus, |v| v.mapv(softplus_scalar))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp, |v| v.mapv(f64::exp))
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(Op::Ln, |v| v.mapv(f64::ln))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(Op::Sqrt, |v| v.mapv(f64::sqrt))
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square, |v| v.mapv(|x| x * x))
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        let v = self.value();
        self.tape.push(Op::Scale(self.id, k), v * k)
    }

    pub fn add_scalar(self, k: f64) -> Var<'t> {
        let v = self.value();
        self.tape.push(Op::AddScalar(self.id), v + k)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// Row sums: NxD -> Nx1.
    pub fn sum_rows(self) -> Var<'t> {
        let v = self.value();
        let s = v.sum_axis(Axis(1)).insert_axis(Axis(1));
        self.tape.push(Op::SumRows(self.id), s)
    }

    pub fn sum_all(self) -> Var<'t> {
        let v = self.value();
        self.tape.push(Op::SumAll(self.id), Array2::from_elem((1, 1), v.sum()))
    }

    pub fn mean_all(self) -> Var<'t> {
        let v = self.value();
        let n = v.len() as f64;
        self.tape.push(Op::MeanAll(self.id), Array2::from_elem((1, 1), v.sum() / n))
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t> {
        let v = self.value();
        assert!(start < end && end <= v.ncols(), "column slice out of range");
        let piece = v.slice(s![.., start..end]).to_owned();
        self.tape.push(Op::SliceCols(self.id, start, end), piece)
    }

    pub fn concat_cols(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        assert_eq!(a.nrows(), b.nrows(), "row counts differ in concat");
        let joined = ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("concat");
        self.tape.push(Op::ConcatCols(self.id, rhs.id), joined)
    }

    /// Accumulates `d loss / d node` for every node reachable from this
    /// scalar loss. Errors if the value is not 1x1.
    pub fn backward(self) -> Result<Gradients> {
        let nodes = self.tape.nodes.borrow();
        if nodes[self.id].value.dim() != (1, 1) {
            return Err(CoreError::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                nodes[self.id].value.dim()
            )));
        }
        let n = nodes.len();
        let mut grads: Vec<Option<Array2<f64>>> = (0..n).map(|_| None).collect();
        grads[self.id] = Some(Array2::from_elem((1, 1), 1.0));

        for id in (0..=self.id).rev() {
            let Some(g) = grads[id].clone() else { continue };
            match nodes[id].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (va, vb) = (&nodes[a].value, &nodes[b].value);
                    accumulate(&mut grads[a], g.dot(&vb.t()));
                    accumulate(&mut grads[b], va.t().dot(&g));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a], g.clone());
                    accumulate(&mut grads[b], g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[a], g.clone());
                    accumulate(&mut grads[b], -g);
                }
                Op::Mul(a, b) => {
                    accumulate(&mut grads[a], &g * &nodes[b].value);
                    accumulate(&mut grads[b], &g * &nodes[a].value);
                }
                Op::Div(a, b) => {
                    let vb = &nodes[b].value;
                    accumulate(&mut grads[a], &g / vb);
                    let z = &nodes[id].value;
                    accumulate(&mut grads[b], -(&g * z) / vb);
                }
                Op::AddRow(a, r) => {
                    accumulate(&mut grads[a], g.clone());
                    accumulate(&mut grads[r], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::MulRow(a, r) => {
                    let row = nodes[r].value.row(0).to_owned();
                    accumulate(&mut grads[a], &g * &row);
                    let gr = (&g * &nodes[a].value).sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[r], gr);
                }
                Op::SubCol(a, c) => {
                    accumulate(&mut grads[a], g.clone());
                    accumulate(&mut grads[c], -g.sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
                Op::DivCol(a, c) => {
                    let col = &nodes[c].value;
                    accumulate(&mut grads[a], &g / col);
                    let z = &nodes[id].value;
                    let gc = -(&g * z).sum_axis(Axis(1)).insert_axis(Axis(1)) / col;
                    accumulate(&mut grads[c], gc);
                }
                Op::Elu(a) => {
                    let d = nodes[a].value.mapv(|x| if x > 0.0 { 1.0 } else { x.exp() });
                    accumulate(&mut grads[a], &g * &d);
                }
                Op::Tanh(a) => {
                    let y = &nodes[id].value;
                    accumulate(&mut grads[a], &g * &y.mapv(|t| 1.0 - t * t));
                }
                Op::Softplus(a) => {
                    let d = nodes[a].value.mapv(sigmoid);
                    accumulate(&mut grads[a], &g * &d);
                }
                Op::Exp(a) => {
                    accumulate(&mut grads[a], &g * &nodes[id].value);
                }
                Op::Ln(a) => {
                    accumulate(&mut grads[a], &g / &nodes[a].value);
                }
                Op::Sqrt(a) => {
                    let y = &nodes[id].value;
                    accumulate(&mut grads[a], &g * 0.5 / y);
                }
                Op::Square(a) => {
                    accumulate(&mut grads[a], &g * &nodes[a].value * 2.0);
                }
                Op::Scale(a, k) => {
                    accumulate(&mut grads[a], g * k);
                }
                Op::AddScalar(a) => {
                    accumulate(&mut grads[a], g);
                }
                Op::SumRows(a) => {
                    let d = nodes[a].value.ncols();
                    let wide =
                        g.broadcast((g.nrows(), d)).expect("sum_rows broadcast").to_owned();
                    accumulate(&mut grads[a], wide);
                }
                Op::SumAll(a) => {
                    accumulate(&mut grads[a], Array2::from_elem(nodes[a].value.dim(), g[[0, 0]]));
                }
                Op::MeanAll(a) => {
                    let dim = nodes[a].value.dim();
                    let scale = g[[0, 0]] / nodes[a].value.len() as f64;
                    accumulate(&mut grads[a], Array2::from_elem(dim, scale));
                }
                Op::SliceCols(a, start, end) => {
                    let mut full = Array2::zeros(nodes[a].value.dim());
                    full.slice_mut(s![.., start..end]).assign(&g);
                    accumulate(&mut grads[a], full);
                }
                Op::ConcatCols(a, b) => {
                    let wa = nodes[a].value.ncols();
                    accumulate(&mut grads[a], g.slice(s![.., ..wa]).to_owned());
                    accumulate(&mut grads[b], g.slice(s![.., wa..]).to_owned());
                }
            }
        }

        let shapes = nodes.iter().map(|n| n.value.dim()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, contribution: Array2<f64>) {
    match slot {
        Some(existing) => *existing += &contribution,
        None => *slot = Some(contribution),
    }
}
