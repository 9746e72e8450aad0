//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends a node to the
//! owning [`Tape`]. [`Tape::backward`] walks the nodes in reverse and returns
//! a [`Gradients`] map holding `∂loss/∂node` for every node that depends on a
//! differentiable leaf. Leaves created with [`Tape::constant`] never receive
//! gradients and prune the backward sweep.
//!
//! Fused operations with hand-written adjoints (the causal attention sweep
//! and the ray renderer) plug in through [`CustomOp`].

use std::cell::{Ref, RefCell};
use std::fmt;

use super::kernels::gemm;
use super::{relu_pow_scalar, NumericsError, Tensor};

/// Adjoint of a fused operation recorded with [`Var::custom`].
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Returns one gradient buffer per input (or `None` when the input has no
    /// dependence), given the upstream gradient of the output.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    AddCol(usize, usize),
    MulCol(usize, usize),
    AddScalarVar(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    ReluPow(usize, u32),
    Exp(usize),
    Sin(usize),
    Cos(usize),
    Softplus(usize),
    Powf(usize, f64),
    SumAll(usize),
    SumCols(usize),
    SumRows(usize),
    SegmentSum(usize, usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize, usize),
    Reshape(usize),
    Custom(Vec<usize>, Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording scope for differentiable computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Result of a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient with respect to `var`, or zeros of the matching shape when
    /// the loss does not depend on it.
    pub fn wrt(&self, var: &Var<'_>) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&var.shape()),
        }
    }
}

fn mismatch(op: &'static str, detail: String) -> NumericsError {
    NumericsError::ShapeMismatch { op, detail }
}

fn two_d(t: &Tensor, op: &'static str) -> Result<(usize, usize), NumericsError> {
    if t.ndim() != 2 {
        return Err(mismatch(op, format!("expected a matrix, got shape {:?}", t.shape())));
    }
    Ok((t.rows(), t.cols()))
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

    /// Differentiable leaf.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn record(&self, value: Tensor, op: Op, parents: &[usize]) -> Var<'_> {
        let rg = self.requires(parents);
        self.push(value, op, rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: &Var<'_>) -> Result<Gradients, NumericsError> {
        assert!(std::ptr::eq(self, loss.tape), "loss recorded on a different tape");
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(NumericsError::NonScalarLoss { shape: root.value.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| {
                g.map(|data| Tensor::new(n.value.shape().to_vec(), data).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, delta: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(delta),
    }
}

fn accumulate_with(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: usize,
    f: impl FnOnce(&mut [f64]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    f(slot);
}

fn elementwise_grad(x: &Tensor, g: &[f64], df: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    x.data().iter().zip(g).map(|(&xi, &gi)| df(xi, gi)).collect()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (n, k) = (val(*a).rows(), val(*a).cols());
            let m = val(*b).cols();
            if nodes[*a].requires_grad {
                accumulate_with(grads, nodes, *a, |ga| {
                    gemm(n, m, k, g, false, val(*b).data(), true, ga, true)
                });
            }
            if nodes[*b].requires_grad {
                accumulate_with(grads, nodes, *b, |gb| {
                    gemm(k, n, m, val(*a).data(), true, g, false, gb, true)
                });
            }
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            accumulate(grads, nodes, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            accumulate(grads, nodes, *b, g.iter().map(|x| -x).collect());
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            accumulate(grads, nodes, *a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
            accumulate(grads, nodes, *b, g.iter().zip(va).map(|(g, x)| g * x).collect());
        }
        Op::AddRow(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            let m = val(*b).len();
            accumulate_with(grads, nodes, *b, |gb| {
                for row in g.chunks(m) {
                    gb.iter_mut().zip(row).for_each(|(s, x)| *s += x);
                }
            });
        }
        Op::MulRow(a, b) => {
            let vb = val(*b).data();
            let va = val(*a).data();
            let m = vb.len();
            accumulate_with(grads, nodes, *a, |ga| {
                for (grow, arow) in g.chunks(m).zip(ga.chunks_mut(m)) {
                    for ((s, gi), bi) in arow.iter_mut().zip(grow).zip(vb) {
                        *s += gi * bi;
                    }
                }
            });
            accumulate_with(grads, nodes, *b, |gb| {
                for (grow, xrow) in g.chunks(m).zip(va.chunks(m)) {
                    for ((s, gi), xi) in gb.iter_mut().zip(grow).zip(xrow) {
                        *s += gi * xi;
                    }
                }
            });
        }
        Op::AddCol(a, c) => {
            accumulate(grads, nodes, *a, g.to_vec());
            let m = val(*a).cols();
            accumulate(grads, nodes, *c, g.chunks(m).map(|r| r.iter().sum()).collect());
        }
        Op::MulCol(a, c) => {
            let vc = val(*c).data();
            let va = val(*a).data();
            let m = val(*a).cols();
            accumulate_with(grads, nodes, *a, |ga| {
                for ((grow, arow), ci) in g.chunks(m).zip(ga.chunks_mut(m)).zip(vc) {
                    arow.iter_mut().zip(grow).for_each(|(s, gi)| *s += gi * ci);
                }
            });
            accumulate(
                grads,
                nodes,
                *c,
                g.chunks(m).zip(va.chunks(m)).map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum()).collect(),
            );
        }
        Op::AddScalarVar(a, s) => {
            accumulate(grads, nodes, *a, g.to_vec());
            accumulate(grads, nodes, *s, vec![g.iter().sum()]);
        }
        Op::Scale(a, s) => accumulate(grads, nodes, *a, g.iter().map(|x| x * s).collect()),
        Op::AddScalar(a) => accumulate(grads, nodes, *a, g.to_vec()),
        Op::ReluPow(a, ell) => {
            let ell = *ell;
            let d = elementwise_grad(val(*a), g, |x, gi| {
                if x > 0.0 {
                    gi * f64::from(ell) * relu_pow_scalar(x, ell - 1)
                } else {
                    0.0
                }
            });
            accumulate(grads, nodes, *a, d);
        }
        Op::Exp(a) => {
            let d = node.value.data().iter().zip(g).map(|(y, gi)| y * gi).collect();
            accumulate(grads, nodes, *a, d);
        }
        Op::Sin(a) => accumulate(grads, nodes, *a, elementwise_grad(val(*a), g, |x, gi| gi * x.cos())),
        Op::Cos(a) => accumulate(grads, nodes, *a, elementwise_grad(val(*a), g, |x, gi| -gi * x.sin())),
        Op::Softplus(a) => {
            accumulate(grads, nodes, *a, elementwise_grad(val(*a), g, |x, gi| gi * sigmoid(x)))
        }
        Op::Powf(a, p) => {
            let p = *p;
            accumulate(grads, nodes, *a, elementwise_grad(val(*a), g, |x, gi| gi * p * x.powf(p - 1.0)))
        }
        Op::SumAll(a) => accumulate(grads, nodes, *a, vec![g[0]; val(*a).len()]),
        Op::SumCols(a) => {
            let m = val(*a).cols();
            accumulate(grads, nodes, *a, g.iter().flat_map(|&gi| std::iter::repeat_n(gi, m)).collect());
        }
        Op::SumRows(a) => {
            let n = val(*a).rows();
            accumulate(grads, nodes, *a, g.repeat(n));
        }
        Op::SegmentSum(a, seg) => {
            let m = val(*a).cols();
            accumulate_with(grads, nodes, *a, |ga| {
                for (block, grow) in ga.chunks_mut(seg * m).zip(g.chunks(m)) {
                    for row in block.chunks_mut(m) {
                        row.iter_mut().zip(grow).for_each(|(s, x)| *s += x);
                    }
                }
            });
        }
        Op::ConcatCols(parts) => {
            let total = node.value.cols();
            let mut offset = 0;
            for &p in parts {
                let w = val(p).cols();
                if nodes[p].requires_grad {
                    let d = g.chunks(total).flat_map(|r| r[offset..offset + w].iter().copied()).collect();
                    accumulate(grads, nodes, p, d);
                }
                offset += w;
            }
        }
        Op::SliceCols(a, start, end) => {
            let m = val(*a).cols();
            let w = end - start;
            accumulate_with(grads, nodes, *a, |ga| {
                for (arow, grow) in ga.chunks_mut(m).zip(g.chunks(w)) {
                    arow[*start..*end].iter_mut().zip(grow).for_each(|(s, x)| *s += x);
                }
            });
        }
        Op::Reshape(a) => accumulate(grads, nodes, *a, g.to_vec()),
        Op::Custom(inputs, op) => {
            let ins: Vec<&Tensor> = inputs.iter().map(|&i| val(i)).collect();
            let outs = op.backward(&ins, &node.value, g);
            for (&i, d) in inputs.iter().zip(outs) {
                if let Some(d) = d {
                    accumulate(grads, nodes, i, d);
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.value().rows()
    }

    pub fn cols(&self) -> usize {
        self.value().cols()
    }

    /// Copy of the current value.
    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars recorded on different tapes");
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let v = self.value().map(f);
        self.tape.record(v, op, &[self.id])
    }

    fn binary_same_shape(
        &self,
        other: &Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>, NumericsError> {
        self.same_tape(other);
        let v = {
            let (a, b) = (self.value(), other.value());
            if a.shape() != b.shape() {
                return Err(mismatch(name, format!("{:?} vs {:?}", a.shape(), b.shape())));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self.tape.record(v, op, &[self.id, other.id]))
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>, NumericsError> {
        self.same_tape(other);
        let v = {
            let (a, b) = (self.value(), other.value());
            let (n, k) = two_d(&a, "matmul")?;
            let (k2, m) = two_d(&b, "matmul")?;
            if k != k2 {
                return Err(mismatch("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
            }
            let mut out = vec![0.0; n * m];
            gemm(n, k, m, a.data(), false, b.data(), false, &mut out, false);
            Tensor::matrix(n, m, out)?
        };
        Ok(self.tape.record(v, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>, NumericsError> {
        self.binary_same_shape(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>, NumericsError> {
        self.binary_same_shape(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>, NumericsError> {
        self.binary_same_shape(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    fn row_broadcast(
        &self,
        row: &Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>, NumericsError> {
        self.same_tape(row);
        let v = {
            let (a, b) = (self.value(), row.value());
            let (_, m) = two_d(&a, name)?;
            if b.len() != m {
                return Err(mismatch(name, format!("{:?} with row {:?}", a.shape(), b.shape())));
            }
            let data = a
                .data()
                .chunks(m)
                .flat_map(|r| r.iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>())
                .collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self.tape.record(v, op, &[self.id, row.id]))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&self, row: &Var<'t>) -> Result<Var<'t>, NumericsError> {
        self.row_broadcast(row, "add_row", |a, b| a + b, Op::AddRow(self.id, row.id))
    }

    /// Multiplies every row elementwise by a length-`cols` vector.
    pub fn mul_row(&self, row: &Var<'t>) -> Result<Var<'t>, NumericsError> {
        self.row_broadcast(row, "mul_row", |a, b| a * b, Op::MulRow(self.id, row.id))
    }

    fn col_broadcast(
        &self,
        col: &Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>, NumericsError> {
        self.same_tape(col);
        let v = {
            let (a, c) = (self.value(), col.value());
            let (n, m) = two_d(&a, name)?;
            if c.len() != n {
                return Err(mismatch(name, format!("{:?} with column {:?}", a.shape(), c.shape())));
            }
            let data = a
                .data()
                .chunks(m)
                .zip(c.data())
                .flat_map(|(r, &ci)| r.iter().map(|&x| f(x, ci)).collect::<Vec<_>>())
                .collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self.tape.record(v, op, &[self.id, col.id]))
    }

    /// Adds `col[i]` to every entry of row `i`.
    pub fn add_col(&self, col: &Var<'t>) -> Result<Var<'t>, NumericsError> {
        self.col_broadcast(col, "add_col", |a, b| a + b, Op::AddCol(self.id, col.id))
    }

    /// Multiplies row `i` by `col[i]`.
    pub fn mul_col(&self, col: &Var<'t>) -> Result<Var<'t>, NumericsError> {
        self.col_broadcast(col, "mul_col", |a, b| a * b, Op::MulCol(self.id, col.id))
    }

    /// Adds a single-element var to every entry.
    pub fn add_scalar_var(&self, s: &Var<'t>) -> Result<Var<'t>, NumericsError> {
        self.same_tape(s);
        let sv = {
            let s = s.value();
            if s.len() != 1 {
                return Err(mismatch("add_scalar_var", format!("scalar has shape {:?}", s.shape())));
            }
            s.data()[0]
        };
        let v = self.value().map(|x| x + sv);
        Ok(self.tape.record(v, Op::AddScalarVar(self.id, s.id), &[self.id, s.id]))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, s), |x| x * s)
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |x| x + s)
    }

    /// `max(0, x)^ell` elementwise.
    pub fn relu_pow(&self, ell: u32) -> Result<Var<'t>, NumericsError> {
        if ell == 0 {
            return Err(NumericsError::InvalidPower);
        }
        Ok(self.unary(Op::ReluPow(self.id, ell), |x| relu_pow_scalar(x, ell)))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn sin(&self) -> Var<'t> {
        self.unary(Op::Sin(self.id), f64::sin)
    }

    pub fn cos(&self) -> Var<'t> {
        self.unary(Op::Cos(self.id), f64::cos)
    }

    pub fn softplus(&self) -> Var<'t> {
        self.unary(Op::Softplus(self.id), softplus)
    }

    /// `x^p`; only meaningful for positive entries.
    pub fn powf(&self, p: f64) -> Var<'t> {
        self.unary(Op::Powf(self.id, p), |x| x.powf(p))
    }

    pub fn square(&self) -> Result<Var<'t>, NumericsError> {
        self.mul(self)
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.tape.record(Tensor::scalar(s), Op::SumAll(self.id), &[self.id])
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Per-row sum: `[n × m] -> [n]`.
    pub fn sum_cols(&self) -> Result<Var<'t>, NumericsError> {
        let v = {
            let a = self.value();
            let (_, m) = two_d(&a, "sum_cols")?;
            Tensor::vector(a.data().chunks(m).map(|r| r.iter().sum()).collect())
        };
        Ok(self.tape.record(v, Op::SumCols(self.id), &[self.id]))
    }

    /// Per-column sum: `[n × m] -> [m]`.
    pub fn sum_rows(&self) -> Result<Var<'t>, NumericsError> {
        let v = {
            let a = self.value();
            let (_, m) = two_d(&a, "sum_rows")?;
            let mut out = vec![0.0; m];
            for r in a.data().chunks(m) {
                out.iter_mut().zip(r).for_each(|(s, x)| *s += x);
            }
            Tensor::vector(out)
        };
        Ok(self.tape.record(v, Op::SumRows(self.id), &[self.id]))
    }

    /// Sums consecutive groups of `seg` rows: `[n × m] -> [n/seg × m]`.
    pub fn segment_sum(&self, seg: usize) -> Result<Var<'t>, NumericsError> {
        let v = {
            let a = self.value();
            let (n, m) = two_d(&a, "segment_sum")?;
            if seg == 0 || n % seg != 0 {
                return Err(mismatch("segment_sum", format!("{n} rows in segments of {seg}")));
            }
            let mut out = vec![0.0; (n / seg) * m];
            for (block, orow) in a.data().chunks(seg * m).zip(out.chunks_mut(m)) {
                for r in block.chunks(m) {
                    orow.iter_mut().zip(r).for_each(|(s, x)| *s += x);
                }
            }
            Tensor::matrix(n / seg, m, out)?
        };
        Ok(self.tape.record(v, Op::SegmentSum(self.id, seg), &[self.id]))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t>, NumericsError> {
        let v = {
            let a = self.value();
            let (n, m) = two_d(&a, "slice_cols")?;
            if start > end || end > m {
                return Err(mismatch("slice_cols", format!("{start}..{end} of {m} columns")));
            }
            let data = a.data().chunks(m).flat_map(|r| r[start..end].iter().copied()).collect();
            Tensor::matrix(n, end - start, data)?
        };
        Ok(self.tape.record(v, Op::SliceCols(self.id, start, end), &[self.id]))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var<'t>, NumericsError> {
        let v = self.to_tensor().reshaped(shape)?;
        Ok(self.tape.record(v, Op::Reshape(self.id), &[self.id]))
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>, NumericsError> {
        let first = parts.first().ok_or_else(|| mismatch("concat_cols", "no inputs".into()))?;
        let tape = first.tape;
        let v = {
            let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
            let n = vals[0].rows();
            let mut widths = Vec::with_capacity(vals.len());
            for t in &vals {
                let (r, c) = two_d(t, "concat_cols")?;
                if r != n {
                    return Err(mismatch("concat_cols", format!("row counts {n} and {r}")));
                }
                widths.push(c);
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(n * total);
            for i in 0..n {
                for (t, &w) in vals.iter().zip(&widths) {
                    data.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
                }
            }
            Tensor::matrix(n, total, data)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(tape.record(v, Op::ConcatCols(ids.clone()), &ids))
    }

    /// Records a fused operation whose forward value was computed by the
    /// caller from `inputs`.
    pub fn custom(inputs: &[Var<'t>], output: Tensor, op: Box<dyn CustomOp>) -> Var<'t> {
        let tape = inputs[0].tape;
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        tape.record(output, Op::Custom(ids.clone(), op), &ids)
    }
}
